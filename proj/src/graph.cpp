#include "esf/graph.hpp"

#include <cmath>
#include <queue>
#include <sstream>
#include <unordered_set>

namespace esf {

const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::DimMismatch: return "DimMismatch";
        case ErrorCode::CycleDetected: return "CycleDetected";
        case ErrorCode::UnknownNode: return "UnknownNode";
        case ErrorCode::DuplicateNode: return "DuplicateNode";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::NonConvergence: return "NonConvergence";
        case ErrorCode::NonFiniteCost: return "NonFiniteCost";
        case ErrorCode::SolverStalled: return "SolverStalled";
        case ErrorCode::FlowAborted: return "FlowAborted";
        case ErrorCode::ParseError: return "ParseError";
        case ErrorCode::IoError: return "IoError";
        case ErrorCode::ConfigError: return "ConfigError";
    }
    return "Unknown";
}

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

void check_dim(int expected, Eigen::Index got, const char* what) {
    if (expected != got) {
        std::ostringstream os;
        os << what << ": expected dimension " << expected << ", got " << got;
        throw Error(ErrorCode::DimMismatch, os.str());
    }
}

double sech2(double z) {
    const double c = std::cosh(z);
    return 1.0 / (c * c);
}

}  // namespace

Mechanism::Mechanism() : v_(Shift{Vector()}) {}
Mechanism::Mechanism(Shift s) : v_(std::move(s)) {}
Mechanism::Mechanism(Affine a) : v_(std::move(a)) {}
Mechanism::Mechanism(SmoothResidual r) : v_(std::move(r)) {}
Mechanism::Mechanism(Composite c) : v_(std::move(c)) {}

int Mechanism::in_dim() const {
    return std::visit(overloaded{
                          [](const Shift& s) { return int(s.b.size()); },
                          [](const Affine& a) { return int(a.A.cols()); },
                          [](const SmoothResidual& r) { return int(r.W1.cols()); },
                          [](const Composite& c) { return c.stages.empty() ? 0 : c.stages.front().in_dim(); },
                      },
                      v_);
}

int Mechanism::out_dim() const {
    return std::visit(overloaded{
                          [](const Shift& s) { return int(s.b.size()); },
                          [](const Affine& a) { return int(a.A.rows()); },
                          [](const SmoothResidual& r) { return int(r.W2.rows()); },
                          [](const Composite& c) { return c.stages.empty() ? 0 : c.stages.back().out_dim(); },
                      },
                      v_);
}

bool Mechanism::is_translation() const {
    return std::visit(overloaded{
                          [](const Shift&) { return true; },
                          [](const Affine& a) {
                              return a.A.rows() == a.A.cols() &&
                                     a.A.isApprox(Matrix::Identity(a.A.rows(), a.A.cols()), 0.0);
                          },
                          [](const SmoothResidual& r) { return r.W2.isZero(0.0) || r.W1.isZero(0.0); },
                          [](const Composite& c) {
                              for (const auto& s : c.stages)
                                  if (!s.is_translation()) return false;
                              return true;
                          },
                      },
                      v_);
}

Vector Mechanism::apply(const Eigen::Ref<const Vector>& x) const {
    check_dim(in_dim(), x.size(), "apply_mechanism input");
    return std::visit(overloaded{
                          [&](const Shift& s) -> Vector { return x + s.b; },
                          [&](const Affine& a) -> Vector { return a.A * x + a.b; },
                          [&](const SmoothResidual& r) -> Vector {
                              const Vector z = r.W1 * x + r.b1;
                              return x + r.W2 * z.array().tanh().matrix();
                          },
                          [&](const Composite& c) -> Vector {
                              Vector y = x;
                              for (const auto& s : c.stages) y = s.apply(y);
                              return y;
                          },
                      },
                      v_);
}

Vector Mechanism::vjp(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& w) const {
    check_dim(in_dim(), x.size(), "mechanism_vjp input");
    check_dim(out_dim(), w.size(), "mechanism_vjp cotangent");
    return std::visit(overloaded{
                          [&](const Shift&) -> Vector { return w; },
                          [&](const Affine& a) -> Vector { return a.A.transpose() * w; },
                          [&](const SmoothResidual& r) -> Vector {
                              const Vector z = r.W1 * x + r.b1;
                              Vector inner = r.W2.transpose() * w;
                              for (Eigen::Index h = 0; h < z.size(); ++h) inner[h] *= sech2(z[h]);
                              return w + r.W1.transpose() * inner;
                          },
                          [&](const Composite& c) -> Vector {
                              std::vector<Vector> inputs;
                              inputs.reserve(c.stages.size());
                              Vector y = x;
                              for (const auto& s : c.stages) {
                                  inputs.push_back(y);
                                  y = s.apply(y);
                              }
                              Vector g = w;
                              for (std::size_t k = c.stages.size(); k-- > 0;) g = c.stages[k].vjp(inputs[k], g);
                              return g;
                          },
                      },
                      v_);
}

Matrix Mechanism::jacobian(const Eigen::Ref<const Vector>& x) const {
    check_dim(in_dim(), x.size(), "jacobian input");
    return std::visit(overloaded{
                          [&](const Shift& s) -> Matrix { return Matrix::Identity(s.b.size(), s.b.size()); },
                          [&](const Affine& a) -> Matrix { return a.A; },
                          [&](const SmoothResidual& r) -> Matrix {
                              const Vector z = r.W1 * x + r.b1;
                              Vector d(z.size());
                              for (Eigen::Index h = 0; h < z.size(); ++h) d[h] = sech2(z[h]);
                              return Matrix::Identity(x.size(), x.size()) + r.W2 * d.asDiagonal() * r.W1;
                          },
                          [&](const Composite& c) -> Matrix {
                              Matrix J = Matrix::Identity(x.size(), x.size());
                              Vector y = x;
                              for (const auto& s : c.stages) {
                                  J = s.jacobian(y) * J;
                                  y = s.apply(y);
                              }
                              return J;
                          },
                      },
                      v_);
}

Matrix Mechanism::apply_rows(const Matrix& X) const {
    check_dim(in_dim(), X.cols(), "pushforward points");
    if (const auto* s = std::get_if<Shift>(&v_)) return X.rowwise() + s->b.transpose();
    Matrix Y(X.rows(), out_dim());
    for (Eigen::Index k = 0; k < X.rows(); ++k) Y.row(k) = apply(X.row(k).transpose()).transpose();
    return Y;
}

Matrix Mechanism::vjp_rows(const Matrix& X, const Matrix& W) const {
    check_dim(in_dim(), X.cols(), "vjp points");
    check_dim(out_dim(), W.cols(), "vjp cotangents");
    if (X.rows() != W.rows()) throw Error(ErrorCode::DimMismatch, "vjp_rows: row count mismatch");
    if (std::holds_alternative<Shift>(v_)) return W;
    Matrix G(X.rows(), in_dim());
    for (Eigen::Index k = 0; k < X.rows(); ++k)
        G.row(k) = vjp(X.row(k).transpose(), W.row(k).transpose()).transpose();
    return G;
}

Matrix Mechanism::jvp_rows(const Matrix& X, const Matrix& V) const {
    check_dim(in_dim(), X.cols(), "jvp points");
    check_dim(in_dim(), V.cols(), "jvp tangents");
    if (X.rows() != V.rows()) throw Error(ErrorCode::DimMismatch, "jvp_rows: row count mismatch");
    if (std::holds_alternative<Shift>(v_)) return V;
    Matrix G(X.rows(), out_dim());
    for (Eigen::Index k = 0; k < X.rows(); ++k)
        G.row(k) = (jacobian(X.row(k).transpose()) * V.row(k).transpose()).transpose();
    return G;
}

double spectral_norm_estimate(const Matrix& A, int iters) {
    if (A.size() == 0) return 0.0;
    Vector v = Vector::Ones(A.cols()) / std::sqrt(double(A.cols()));
    // Break symmetry so a ones-orthogonal top singular vector is still found.
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] += 1e-3 * double(i + 1);
    v.normalize();
    double sigma = 0.0;
    for (int it = 0; it < iters; ++it) {
        const Vector u = A * v;
        const Vector w = A.transpose() * u;
        const double n = w.norm();
        if (n == 0.0) return 0.0;
        v = w / n;
        sigma = std::sqrt(n);
    }
    return std::max(sigma, (A * v).norm());
}

Mechanism make_shift(Vector b) { return Mechanism(Shift{std::move(b)}); }

Mechanism make_affine(Matrix A, Vector b) {
    if (A.rows() != b.size()) throw Error(ErrorCode::DimMismatch, "affine: A rows must match b");
    return Mechanism(Affine{std::move(A), std::move(b)});
}

Mechanism make_smooth_residual(Matrix W1, Matrix W2, Vector b1, double scale) {
    if (!(scale >= 0.0 && scale < 1.0))
        throw Error(ErrorCode::InvalidArgument, "smooth residual: scale must lie in [0, 1)");
    if (W1.rows() != W2.cols() || W2.rows() != W1.cols() || b1.size() != W1.rows())
        throw Error(ErrorCode::DimMismatch, "smooth residual: need W1 HxD, W2 DxH, b1 H");
    const double bound = spectral_norm_estimate(W1) * spectral_norm_estimate(W2);
    if (bound > 0.0) W2 *= scale / bound;
    return Mechanism(SmoothResidual{std::move(W1), std::move(W2), std::move(b1), scale});
}

Mechanism make_composite(std::vector<Mechanism> stages) {
    if (stages.empty()) throw Error(ErrorCode::InvalidArgument, "composite: needs at least one stage");
    for (std::size_t k = 1; k < stages.size(); ++k)
        if (stages[k - 1].out_dim() != stages[k].in_dim())
            throw Error(ErrorCode::DimMismatch, "composite: stage " + std::to_string(k) + " input dim mismatch");
    return Mechanism(Composite{std::move(stages)});
}

Vector apply_mechanism(const Mechanism& m, const Eigen::Ref<const Vector>& x) { return m.apply(x); }

Vector mechanism_vjp(const Mechanism& m, const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& w) {
    return m.vjp(x, w);
}

Matrix mechanism_jacobian_fd(const Mechanism& m, const Eigen::Ref<const Vector>& x, double h) {
    if (!(h > 0.0)) throw Error(ErrorCode::InvalidArgument, "finite difference step must be positive");
    Matrix J(m.out_dim(), m.in_dim());
    Vector xp = x, xm = x;
    for (int j = 0; j < m.in_dim(); ++j) {
        xp[j] = x[j] + h;
        xm[j] = x[j] - h;
        J.col(j) = (m.apply(xp) - m.apply(xm)) / (2.0 * h);
        xp[j] = xm[j] = x[j];
    }
    return J;
}

int CausalGraph::node_index(const std::string& name) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
        if (nodes[i].name == name) return int(i);
    return -1;
}

const NodeSpec& CausalGraph::node(const std::string& name) const {
    const int i = node_index(name);
    if (i < 0) throw Error(ErrorCode::UnknownNode, "no node named '" + name + "'");
    return nodes[std::size_t(i)];
}

std::vector<int> validate_graph(const CausalGraph& g) {
    std::unordered_set<std::string> seen;
    for (const auto& n : g.nodes) {
        if (n.dim < 1) throw Error(ErrorCode::InvalidArgument, "node '" + n.name + "' has dim < 1");
        if (!seen.insert(n.name).second) throw Error(ErrorCode::DuplicateNode, "node '" + n.name + "' declared twice");
    }

    const std::size_t n = g.nodes.size();
    std::vector<std::vector<int>> out(n);
    std::vector<int> indegree(n, 0);
    for (const auto& e : g.edges) {
        const int s = g.node_index(e.src);
        const int d = g.node_index(e.dst);
        if (s < 0) throw Error(ErrorCode::UnknownNode, "edge " + e.label() + ": unknown source '" + e.src + "'");
        if (d < 0) throw Error(ErrorCode::UnknownNode, "edge " + e.label() + ": unknown target '" + e.dst + "'");
        if (s == d) throw Error(ErrorCode::CycleDetected, "edge " + e.label() + " is a self loop");
        if (!(e.weight > 0.0) || !std::isfinite(e.weight))
            throw Error(ErrorCode::InvalidArgument, "edge " + e.label() + ": weight must be positive");
        if (e.mechanism.in_dim() != g.nodes[std::size_t(s)].dim || e.mechanism.out_dim() != g.nodes[std::size_t(d)].dim) {
            std::ostringstream os;
            os << "edge " << e.label() << ": mechanism maps " << e.mechanism.in_dim() << " -> " << e.mechanism.out_dim()
               << " but nodes have dims " << g.nodes[std::size_t(s)].dim << " -> " << g.nodes[std::size_t(d)].dim;
            throw Error(ErrorCode::DimMismatch, os.str());
        }
        out[std::size_t(s)].push_back(d);
        ++indegree[std::size_t(d)];
    }

    // Kahn with a min-heap so the order is deterministic.
    std::priority_queue<int, std::vector<int>, std::greater<>> ready;
    for (std::size_t i = 0; i < n; ++i)
        if (indegree[i] == 0) ready.push(int(i));
    std::vector<int> order;
    order.reserve(n);
    while (!ready.empty()) {
        const int v = ready.top();
        ready.pop();
        order.push_back(v);
        for (int w : out[std::size_t(v)])
            if (--indegree[std::size_t(w)] == 0) ready.push(w);
    }
    if (order.size() != n) throw Error(ErrorCode::CycleDetected, "graph contains a directed cycle");
    return order;
}

std::vector<EdgeIndex> edge_indices(const CausalGraph& g) {
    std::vector<EdgeIndex> idx;
    idx.reserve(g.edges.size());
    for (const auto& e : g.edges) idx.push_back({g.node_index(e.src), g.node_index(e.dst)});
    return idx;
}

}  // namespace esf
