#include "esf/hodge.hpp"

#include "esf/linear.hpp"

#include <cmath>
#include <sstream>

namespace esf {

TangentSheaf::TangentSheaf(const CausalGraph& g, FlowState state, std::vector<RowMatrix> aligners)
    : graph_(&g), state_(std::move(state)), aligners_(std::move(aligners)), idx_(edge_indices(g)) {
    if (aligners_.size() != g.edges.size()) throw Error(ErrorCode::DimMismatch, "tangent sheaf: one aligner per edge");
    if (state_.clouds.size() != g.nodes.size()) throw Error(ErrorCode::DimMismatch, "tangent sheaf: one cloud per node");
    for (std::size_t e = 0; e < aligners_.size(); ++e) {
        const auto& B = aligners_[e];
        if (B.rows() != state_.clouds[std::size_t(idx_[e].src)].size() ||
            B.cols() != state_.clouds[std::size_t(idx_[e].dst)].size())
            throw Error(ErrorCode::DimMismatch, "tangent sheaf: aligner shape for edge " + g.edges[e].label());
    }
}

TangentSheaf TangentSheaf::build(const CausalGraph& g, const FlowState& state, const SinkhornConfig& cfg) {
    FlowConfig fc;
    fc.epsilon = cfg.epsilon;
    fc.sinkhorn = cfg;
    return from_solutions(g, state, solve_edges(state, g, fc));
}

TangentSheaf TangentSheaf::from_solutions(const CausalGraph& g, const FlowState& state,
                                          const std::vector<SinkhornSolution>& sols) {
    std::vector<RowMatrix> B;
    B.reserve(sols.size());
    for (const auto& s : sols) B.push_back(row_normalized_coupling(s));
    return TangentSheaf(g, state, std::move(B));
}

namespace {

void check_field(const TangentSheaf& s, const TangentField& V) {
    const auto& clouds = s.state().clouds;
    if (V.blocks.size() != clouds.size()) throw Error(ErrorCode::DimMismatch, "tangent field: one block per node");
    for (std::size_t v = 0; v < clouds.size(); ++v)
        if (V.blocks[v].rows() != clouds[v].size() || V.blocks[v].cols() != clouds[v].dim())
            throw Error(ErrorCode::DimMismatch, "tangent field: block shape for node " + s.graph().nodes[v].name);
}

void check_cochain(const TangentSheaf& s, const EdgeCochain& W) {
    const auto& g = s.graph();
    if (W.blocks.size() != g.edges.size()) throw Error(ErrorCode::DimMismatch, "edge cochain: one block per edge");
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
        const auto& B = s.aligners()[e];
        if (W.blocks[e].rows() != B.rows() || W.blocks[e].cols() != g.edges[e].mechanism.out_dim())
            throw Error(ErrorCode::DimMismatch, "edge cochain: block shape for edge " + g.edges[e].label());
    }
}

}  // namespace

EdgeCochain TangentSheaf::coboundary(const TangentField& V) const {
    check_field(*this, V);
    EdgeCochain W;
    W.blocks.reserve(graph_->edges.size());
    for (std::size_t e = 0; e < graph_->edges.size(); ++e) {
        const auto u = std::size_t(idx_[e].src), v = std::size_t(idx_[e].dst);
        const Matrix& Xu = state_.clouds[u].points();
        W.blocks.push_back(graph_->edges[e].mechanism.jvp_rows(Xu, V.blocks[u]) - aligners_[e] * V.blocks[v]);
    }
    return W;
}

TangentField TangentSheaf::coboundary_adjoint(const EdgeCochain& W) const {
    check_cochain(*this, W);
    TangentField out = zero_field();
    for (std::size_t e = 0; e < graph_->edges.size(); ++e) {
        const auto u = std::size_t(idx_[e].src), v = std::size_t(idx_[e].dst);
        const Matrix& Xu = state_.clouds[u].points();
        const Vector& au = state_.clouds[u].weights();
        const Vector& av = state_.clouds[v].weights();
        out.blocks[u] += graph_->edges[e].mechanism.vjp_rows(Xu, W.blocks[e]);
        // <B V_v, W>_{a_u} = <V_v, diag(a_v)^-1 B^T diag(a_u) W>_{a_v}
        Matrix back = aligners_[e].transpose() * (au.asDiagonal() * W.blocks[e]);
        for (Eigen::Index l = 0; l < back.rows(); ++l) back.row(l) /= av[l];
        out.blocks[v] -= back;
    }
    return out;
}

TangentField TangentSheaf::laplacian_apply(const TangentField& V) const { return coboundary_adjoint(coboundary(V)); }

double TangentSheaf::node_inner(const TangentField& U, const TangentField& V) const {
    double s = 0.0;
    for (std::size_t v = 0; v < state_.clouds.size(); ++v)
        s += (U.blocks[v].cwiseProduct(V.blocks[v]).rowwise().sum()).dot(state_.clouds[v].weights());
    return s;
}

double TangentSheaf::edge_inner(const EdgeCochain& U, const EdgeCochain& V) const {
    double s = 0.0;
    for (std::size_t e = 0; e < graph_->edges.size(); ++e)
        s += (U.blocks[e].cwiseProduct(V.blocks[e]).rowwise().sum()).dot(
            state_.clouds[std::size_t(idx_[e].src)].weights());
    return s;
}

TangentField TangentSheaf::zero_field() const {
    TangentField V;
    for (const auto& c : state_.clouds) V.blocks.push_back(Matrix::Zero(c.size(), c.dim()));
    return V;
}

EdgeCochain TangentSheaf::zero_cochain() const {
    EdgeCochain W;
    for (std::size_t e = 0; e < graph_->edges.size(); ++e)
        W.blocks.push_back(Matrix::Zero(aligners_[e].rows(), graph_->edges[e].mechanism.out_dim()));
    return W;
}

Eigen::Index TangentSheaf::node_space_dim() const {
    Eigen::Index n = 0;
    for (const auto& c : state_.clouds) n += c.size() * c.dim();
    return n;
}

Eigen::Index TangentSheaf::edge_space_dim() const {
    Eigen::Index n = 0;
    for (std::size_t e = 0; e < graph_->edges.size(); ++e) n += aligners_[e].rows() * graph_->edges[e].mechanism.out_dim();
    return n;
}

namespace {

// Blocks are flattened row by row: particle-major, coordinate-minor.
template <class Blocks>
Vector flatten_blocks(const Blocks& blocks, Eigen::Index total) {
    Vector out(total);
    Eigen::Index o = 0;
    for (const auto& B : blocks) {
        for (Eigen::Index k = 0; k < B.rows(); ++k)
            for (Eigen::Index d = 0; d < B.cols(); ++d) out[o++] = B(k, d);
    }
    return out;
}

void unflatten_into(const Vector& v, std::vector<Matrix>& blocks) {
    Eigen::Index o = 0;
    for (auto& B : blocks)
        for (Eigen::Index k = 0; k < B.rows(); ++k)
            for (Eigen::Index d = 0; d < B.cols(); ++d) B(k, d) = v[o++];
}

}  // namespace

Vector TangentSheaf::flatten(const TangentField& V) const { return flatten_blocks(V.blocks, node_space_dim()); }

TangentField TangentSheaf::unflatten_field(const Vector& v) const {
    if (v.size() != node_space_dim()) throw Error(ErrorCode::DimMismatch, "unflatten: node space size");
    TangentField V = zero_field();
    unflatten_into(v, V.blocks);
    return V;
}

Vector TangentSheaf::flatten(const EdgeCochain& W) const { return flatten_blocks(W.blocks, edge_space_dim()); }

EdgeCochain TangentSheaf::unflatten_cochain(const Vector& w) const {
    if (w.size() != edge_space_dim()) throw Error(ErrorCode::DimMismatch, "unflatten: edge space size");
    EdgeCochain W = zero_cochain();
    unflatten_into(w, W.blocks);
    return W;
}

Vector TangentSheaf::node_metric() const {
    Vector m(node_space_dim());
    Eigen::Index o = 0;
    for (const auto& c : state_.clouds)
        for (Eigen::Index k = 0; k < c.size(); ++k)
            for (int d = 0; d < c.dim(); ++d) m[o++] = c.weights()[k];
    return m;
}

Vector TangentSheaf::edge_metric() const {
    Vector m(edge_space_dim());
    Eigen::Index o = 0;
    for (std::size_t e = 0; e < graph_->edges.size(); ++e) {
        const Vector& a = state_.clouds[std::size_t(idx_[e].src)].weights();
        const int D = graph_->edges[e].mechanism.out_dim();
        for (Eigen::Index k = 0; k < a.size(); ++k)
            for (int d = 0; d < D; ++d) m[o++] = a[k];
    }
    return m;
}

HarmonicResidual harmonic_residual(const TangentSheaf& sheaf, const std::vector<SinkhornSolution>& sols) {
    const CausalGraph& g = sheaf.graph();
    if (sols.size() != g.edges.size()) throw Error(ErrorCode::DimMismatch, "harmonic residual: one solution per edge");
    HarmonicResidual out;
    for (std::size_t e = 0; e < g.edges.size(); ++e)
        out.stress.blocks.push_back(g.edges[e].weight * potential_gradient_source(sols[e]));
    out.stress_norm = std::sqrt(sheaf.edge_inner(out.stress, out.stress));
    if (out.stress_norm <= 1e-10) {
        out.stationarity = 0.0;
        return out;
    }
    const TangentField div = sheaf.coboundary_adjoint(out.stress);
    out.stationarity = std::sqrt(sheaf.node_inner(div, div)) / out.stress_norm;
    return out;
}

HarmonicResidual harmonic_residual(const CausalGraph& g, const FlowState& state, const FlowConfig& cfg) {
    const auto sols = solve_edges(state, g, cfg);
    return harmonic_residual(TangentSheaf::from_solutions(g, state, sols), sols);
}

EigenEstimate extremal_eigen_estimate(const TangentSheaf& sheaf, Extremal which, int iters, double shift) {
    const Vector metric = sheaf.node_metric();
    const Eigen::Index n = metric.size();
    EigenEstimate est;
    if (n == 0) {
        est.converged = true;
        return est;
    }
    const auto op = [&](const Vector& v) { return sheaf.flatten(sheaf.laplacian_apply(sheaf.unflatten_field(v))); };
    const auto norm = [&](const Vector& v) { return std::sqrt(weighted_dot(v, v, metric)); };

    Vector x(n);
    for (Eigen::Index k = 0; k < n; ++k) x[k] = 1.0 + 0.5 * std::sin(1.7 * double(k + 1));
    x /= norm(x);

    double lambda = which == Extremal::Max ? 0.0 : std::numeric_limits<double>::infinity();
    for (int it = 0; it < iters; ++it) {
        Vector y;
        if (which == Extremal::Max) {
            y = op(x);
        } else {
            const auto shifted = [&](const Vector& v) { return Vector(op(v) + shift * v); };
            const CgResult cg = conjugate_gradient(shifted, x, metric, [](Vector&) {}, 1e-10, 10 * int(n) + 500);
            if (!cg.converged) {
                std::ostringstream os;
                os << "inverse iteration: CG residual " << cg.residual << " after " << cg.iterations << " iterations";
                throw Error(ErrorCode::SolverStalled, os.str());
            }
            y = cg.x;
        }
        const double ny = norm(y);
        est.iterations = it + 1;
        if (ny == 0.0) {
            lambda = 0.0;
            est.converged = true;
            break;
        }
        x = y / ny;
        const double rq = weighted_dot(x, op(x), metric);
        const bool done = std::abs(rq - lambda) <= 1e-14 * std::max(1.0, std::abs(rq));
        lambda = rq;
        if (done) {
            est.converged = true;
            break;
        }
    }
    est.value = lambda;
    return est;
}

HodgeSplit hodge_decompose(const TangentSheaf& sheaf, const EdgeCochain& W, double tol, int max_iters) {
    const Vector metric = sheaf.node_metric();
    const auto op = [&](const Vector& v) { return sheaf.flatten(sheaf.laplacian_apply(sheaf.unflatten_field(v))); };
    const Vector rhs = sheaf.flatten(sheaf.coboundary_adjoint(W));
    const CgResult cg = conjugate_gradient(op, rhs, metric, [](Vector&) {}, tol, max_iters);
    HodgeSplit out;
    out.exact = sheaf.coboundary(sheaf.unflatten_field(cg.x));
    out.harmonic = W;
    for (std::size_t e = 0; e < W.blocks.size(); ++e) out.harmonic.blocks[e] -= out.exact.blocks[e];
    out.cg_iterations = cg.iterations;
    out.cg_residual = cg.residual;
    return out;
}

}  // namespace esf
