#include "esf/implicit_diff.hpp"

#include "esf/linear.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

namespace esf {

OptimalityJacobian::OptimalityJacobian(const SinkhornSolution& sol)
    : P_(sol.coupling()), r_(P_.rowwise().sum()), c_(P_.colwise().sum().transpose()) {
    if ((r_.array() <= 0.0).any() || (c_.array() <= 0.0).any())
        throw Error(ErrorCode::InvalidArgument, "optimality jacobian: plan has an empty row or column");
}

Vector OptimalityJacobian::apply(const Vector& v) const {
    const auto vf = v.head(n());
    const auto vg = v.tail(m());
    Vector out(size());
    out.head(n()) = vf + (P_ * vg).cwiseQuotient(r_);
    out.tail(m()) = vg + (P_.transpose() * vf).cwiseQuotient(c_);
    return out;
}

Vector OptimalityJacobian::apply_transpose(const Vector& v) const {
    // H^T = [[I, P diag(c)^-1], [P^T diag(r)^-1, I]]
    const auto vf = v.head(n());
    const auto vg = v.tail(m());
    Vector out(size());
    out.head(n()) = vf + P_ * vg.cwiseQuotient(c_);
    out.tail(m()) = vg + P_.transpose() * vf.cwiseQuotient(r_);
    return out;
}

Vector OptimalityJacobian::apply_symmetric(const Vector& v) const {
    const auto vf = v.head(n());
    const auto vg = v.tail(m());
    Vector out(size());
    out.head(n()) = r_.cwiseProduct(vf) + P_ * vg;
    out.tail(m()) = c_.cwiseProduct(vg) + P_.transpose() * vf;
    return out;
}

Vector OptimalityJacobian::apply_normalized(const Vector& v) const {
    Vector d(size());
    d << r_.cwiseSqrt(), c_.cwiseSqrt();
    return apply_symmetric(v.cwiseQuotient(d)).cwiseQuotient(d);
}

Matrix OptimalityJacobian::dense() const {
    Matrix H = Matrix::Identity(size(), size());
    for (Eigen::Index i = 0; i < n(); ++i)
        for (Eigen::Index j = 0; j < m(); ++j) {
            H(i, n() + j) = P_(i, j) / r_[i];
            H(n() + j, i) = P_(i, j) / c_[j];
        }
    return H;
}

namespace {

// Removes the component along `dir` (Euclidean).
void remove_direction(Vector& v, const Vector& dir) { v -= (v.dot(dir) / dir.squaredNorm()) * dir; }

Vector gauge_direction(Eigen::Index n, Eigen::Index m) {
    Vector k(n + m);
    k << Vector::Ones(n), -Vector::Ones(m);
    return k;
}

}  // namespace

AdjointResult ift_adjoint_solve(const SinkhornSolution& sol, const Vector& cot_f, const Vector& cot_g,
                                const AdjointOptions& opts) {
    const OptimalityJacobian H(sol);
    const Eigen::Index n = H.n(), m = H.m();
    if (cot_f.size() != n || cot_g.size() != m) throw Error(ErrorCode::DimMismatch, "adjoint solve: cotangent size");
    if (!cot_f.allFinite() || !cot_g.allFinite())
        throw Error(ErrorCode::InvalidArgument, "adjoint solve: non-finite cotangent");

    const Vector kernel = gauge_direction(n, m);
    Vector left_kernel(n + m);
    left_kernel << H.row_mass(), -H.col_mass();

    Vector rhs(n + m);
    rhs << cot_f, cot_g;
    remove_direction(rhs, kernel);

    AdjointResult out;
    const double rhs_norm = rhs.norm();
    if (rhs_norm == 0.0) {
        out.lambda_f = Vector::Zero(n);
        out.lambda_g = Vector::Zero(m);
        return out;
    }

    Vector lambda(n + m);
    if (opts.solver == AdjointSolver::CG) {
        // H^T lambda = rhs  <=>  S mu = rhs, lambda = diag(r, c) mu.
        const auto project = [&](Vector& v) { remove_direction(v, kernel); };
        const auto S = [&](const Vector& v) { return H.apply_symmetric(v); };
        const CgResult cg = conjugate_gradient(S, rhs, Vector(), project, opts.tol, opts.max_iters);
        lambda << H.row_mass().cwiseProduct(cg.x.head(n)), H.col_mass().cwiseProduct(cg.x.tail(m));
        out.iterations = cg.iterations;
    } else {
        // Schur complement on the f block: (I - T) lambda_f = s with
        // T = P diag(c)^-1 P^T diag(r)^-1, whose unit eigenvalue (right vector r,
        // left vector 1) is removed from every term.
        const RowMatrix& P = H.plan();
        const Vector& r = H.row_mass();
        const Vector& c = H.col_mass();
        const Vector p = rhs.head(n), q = rhs.tail(m);
        const double r_sum = r.sum();
        const auto deflate = [&](Vector& v) { v -= (v.sum() / r_sum) * r; };
        Vector term = p - P * q.cwiseQuotient(c);
        deflate(term);
        Vector lf = term;
        int k = 0;
        for (; k < opts.neumann_terms; ++k) {
            term = P * (P.transpose() * term.cwiseQuotient(r)).cwiseQuotient(c);
            deflate(term);
            lf += term;
            if (term.norm() <= 1e-3 * opts.tol * rhs_norm) {
                ++k;
                break;
            }
        }
        lambda << lf, q - P.transpose() * lf.cwiseQuotient(r);
        out.iterations = k;
    }

    remove_direction(lambda, left_kernel);
    Vector res = H.apply_transpose(lambda) - rhs;
    out.residual = res.norm() / rhs_norm;
    out.lambda_f = lambda.head(n);
    out.lambda_g = lambda.tail(m);
    if (!(out.residual <= 10.0 * opts.tol) && !(out.residual <= 1e-12)) {
        std::ostringstream os;
        os << (opts.solver == AdjointSolver::CG ? "CG" : "Neumann") << " adjoint solve stalled after "
           << out.iterations << " iterations, relative residual " << out.residual;
        throw Error(ErrorCode::SolverStalled, os.str());
    }
    return out;
}

namespace {

// g_X row i = 2 sum_j W_ij (x_i - y_j), g_Y row j = 2 sum_i W_ij (y_j - x_i).
PositionGradients contract_with_positions(const RowMatrix& W, const Matrix& X, const Matrix& Y) {
    const Vector row = W.rowwise().sum();
    const Vector col = W.colwise().sum().transpose();
    PositionGradients g;
    g.gX = 2.0 * (row.asDiagonal() * X - W * Y);
    g.gY = 2.0 * (col.asDiagonal() * Y - W.transpose() * X);
    return g;
}

}  // namespace

PositionGradients grad_positions_envelope(const SinkhornSolution& sol) {
    return contract_with_positions(sol.coupling(), sol.source.points(), sol.target.points());
}

IftGradients grad_positions_ift(const SinkhornSolution& sol, const AdjointOptions& opts) {
    const RowMatrix P = sol.coupling();
    const Vector r = P.rowwise().sum();
    const Vector c = P.colwise().sum().transpose();
    const Vector cot_f = sol.source.weights() - r;
    const Vector cot_g = sol.target.weights() - c;

    IftGradients out;
    out.adjoint = ift_adjoint_solve(sol, cot_f, cot_g, opts);

    // d/dX of -lambda^T F: weights lambda_f,i A_ij + lambda_g,j P_ij / c_j.
    RowMatrix W = P;
    for (Eigen::Index i = 0; i < W.rows(); ++i)
        for (Eigen::Index j = 0; j < W.cols(); ++j)
            W(i, j) = P(i, j) * (out.adjoint.lambda_f[i] / r[i] + out.adjoint.lambda_g[j] / c[j]);
    W += P;
    out.grad = contract_with_positions(W, sol.source.points(), sol.target.points());

    // Plan, potentials and adjoints survive into the backward pass; CG scratch is transient.
    const std::size_t n = std::size_t(P.rows()), m = std::size_t(P.cols());
    out.retained.cells_stored = n * m + 2 * (n + m);
    out.retained.iterations = out.adjoint.iterations;
    return out;
}

UnrolledGradients unrolled_grad(const ParticleCloud& src, const ParticleCloud& dst, double epsilon, int iterations) {
    if (iterations < 1) throw Error(ErrorCode::InvalidArgument, "unrolled_grad: need at least one iteration");
    if (!(epsilon > 0.0)) throw Error(ErrorCode::InvalidArgument, "unrolled_grad: epsilon must be positive");
    if ((src.weights().array() <= 0.0).any() || (dst.weights().array() <= 0.0).any())
        throw Error(ErrorCode::InvalidArgument, "unrolled_grad: weights must be strictly positive");

    const Eigen::Index N = src.size(), M = dst.size();
    const double eps = epsilon, inv_eps = 1.0 / epsilon;
    const RowMatrix C = cost_matrix(src.points(), dst.points());
    const Vector& a = src.weights();
    const Vector& b = dst.weights();
    const Vector log_a = a.array().log();
    const Vector log_b = b.array().log();

    // Tape: log S^f per iteration plus f^t and g^t.
    std::vector<RowMatrix> log_sf(std::size_t(iterations), RowMatrix(N, M));
    std::vector<Vector> f_hist(std::size_t(iterations) + 1, Vector::Zero(N));
    std::vector<Vector> g_hist(std::size_t(iterations) + 1, Vector::Zero(M));

    for (int t = 1; t <= iterations; ++t) {
        const Vector& g_prev = g_hist[std::size_t(t - 1)];
        RowMatrix& L = log_sf[std::size_t(t - 1)];
        Vector& f = f_hist[std::size_t(t)];
        for (Eigen::Index i = 0; i < N; ++i) {
            L.row(i) = (log_b.array() + (g_prev.array() - C.row(i).transpose().array()) * inv_eps).transpose();
            const double lse = log_sum_exp(L.row(i).transpose());
            f[i] = -eps * lse;
            L.row(i).array() -= lse;
        }
        Vector& g = g_hist[std::size_t(t)];
        for (Eigen::Index j = 0; j < M; ++j) {
            const Vector col = log_a.array() + (f.array() - C.col(j).array()) * inv_eps;
            g[j] = -eps * log_sum_exp(col);
        }
    }

    UnrolledGradients out;
    out.value = a.dot(f_hist.back()) + b.dot(g_hist.back());
    out.tape.iterations = iterations;
    out.tape.cells_stored = std::size_t(iterations) * std::size_t(N * M) + std::size_t(iterations) * std::size_t(N + M);

    RowMatrix Cbar = RowMatrix::Zero(N, M);
    Vector gbar = b;
    Vector log_sg_col(N);
    for (int t = iterations; t >= 1; --t) {
        const RowMatrix& L = log_sf[std::size_t(t - 1)];
        const Vector& g_prev = g_hist[std::size_t(t - 1)];
        const Vector& g_cur = g_hist[std::size_t(t)];
        Vector fbar = (t == iterations) ? Vector(a) : Vector::Zero(N);

        // g^t_j = -eps lse_i(log a_i + (f^t_i - C_ij)/eps); S^g rebuilt from S^f.
        for (Eigen::Index j = 0; j < M; ++j) {
            log_sg_col = log_a.array() + L.col(j).array() - log_b[j] + (g_cur[j] - g_prev[j]) * inv_eps;
            const double norm = log_sum_exp(log_sg_col);
            const Vector sg = (log_sg_col.array() - norm).exp();
            fbar -= gbar[j] * sg;
            Cbar.col(j) += gbar[j] * sg;
        }
        // f^t_i = -eps lse_j(log b_j + (g^{t-1}_j - C_ij)/eps)
        const RowMatrix Sf = L.array().exp().matrix();
        gbar = -(Sf.transpose() * fbar);
        Cbar += fbar.asDiagonal() * Sf;
    }

    out.grad = contract_with_positions(Cbar, src.points(), dst.points());
    return out;
}

ConditionEstimate hessian_condition_estimate(const SinkhornSolution& sol, int iters) {
    const OptimalityJacobian H(sol);
    const Eigen::Index dim = H.size();
    Vector kernel(dim);
    kernel << H.row_mass().cwiseSqrt(), -H.col_mass().cwiseSqrt();
    kernel.normalize();
    const auto project = [&](Vector& v) { remove_direction(v, kernel); };
    const auto op = [&](const Vector& v) { return H.apply_normalized(v); };

    ConditionEstimate est;
    if (dim - 1 < 1) return est;

    Vector v = Vector::Ones(dim);
    for (Eigen::Index k = 0; k < dim; ++k) v[k] += 0.01 * std::sin(double(k + 1));
    project(v);
    v.normalize();

    double lmax = 0.0;
    for (int it = 0; it < iters; ++it) {
        Vector w = op(v);
        project(w);
        const double rq = v.dot(w);
        const double nw = w.norm();
        if (nw == 0.0) {
            lmax = 0.0;
            break;
        }
        v = w / nw;
        const bool done = std::abs(rq - lmax) <= 1e-15 * std::abs(rq);
        lmax = rq;
        est.iterations = it + 1;
        if (done) break;
    }
    est.lambda_max = lmax;

    Vector u = Vector::Ones(dim);
    for (Eigen::Index k = 0; k < dim; ++k) u[k] += 0.01 * std::cos(double(3 * k + 1));
    project(u);
    u.normalize();
    double lmin = std::numeric_limits<double>::infinity();
    for (int it = 0; it < iters; ++it) {
        const CgResult cg = conjugate_gradient(op, u, Vector(), project, 1e-13, 20 * int(dim) + 200);
        if (!cg.converged || !cg.x.allFinite()) {
            est.stalled = true;
            break;
        }
        Vector x = cg.x;
        project(x);
        const double nx = x.norm();
        if (nx == 0.0) {
            est.stalled = true;
            break;
        }
        x /= nx;
        Vector hx = op(x);
        project(hx);
        const double rq = x.dot(hx);
        const bool done = std::abs(rq - lmin) <= 1e-15 * std::abs(rq);
        lmin = rq;
        u = x;
        if (done) break;
    }
    est.lambda_min = est.stalled ? 0.0 : lmin;
    est.kappa = est.stalled || !(lmin > 0.0) ? std::numeric_limits<double>::infinity() : lmax / lmin;
    return est;
}

}  // namespace esf
