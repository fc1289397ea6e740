#include "esf/sinkhorn.hpp"

#include <cmath>
#include <limits>

namespace esf {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Vector safe_log(const Vector& w) {
    Vector out(w.size());
    for (Eigen::Index i = 0; i < w.size(); ++i) out[i] = w[i] > 0.0 ? std::log(w[i]) : kNegInf;
    return out;
}

// out_i = -eps * logsumexp_j(shift_j - K_ij / eps), K row-major.
void soft_min_rows(const RowMatrix& K, const Vector& shift, double eps, Vector& out, Eigen::ArrayXd& buf) {
    const double inv_eps = 1.0 / eps;
    buf.resize(K.cols());
    for (Eigen::Index i = 0; i < K.rows(); ++i) {
        buf = shift.array() - K.row(i).transpose().array() * inv_eps;
        const double m = buf.maxCoeff();
        if (m == kNegInf) {
            out[i] = std::numeric_limits<double>::infinity();
            continue;
        }
        out[i] = -eps * (m + std::log((buf - m).exp().sum()));
    }
}

// exp with arguments below -500 flushed to zero. Subnormal kernel entries
// are negligible and make every matrix-vector product crawl.
Eigen::ArrayXd kernel_line(const Eigen::ArrayXd& z) {
    return (z < -500.0).select(Eigen::ArrayXd::Zero(z.size()), z.exp());
}

// Newton iterations on the source potential with g eliminated (columns exact).
// The Hessian diag(P1) - P diag(1/b) P^T is applied matrix-free inside
// Jacobi-preconditioned CG. Returns the final l1 row error; f and g are only
// overwritten by accepted steps.
double newton_polish(const RowMatrix& C, const Vector& a, const Vector& b, const Vector& log_a, const Vector& log_b,
                     double eps, double tol, int max_steps, Vector& f, Vector& g, int& steps) {
    const Eigen::Index N = C.rows(), M = C.cols();
    const double inv_eps = 1.0 / eps;
    RowMatrix P(N, M);
    Vector r(N), res(N);
    Eigen::ArrayXd col(N);
    const auto evaluate = [&](const Vector& ft, Vector& gt) {
        for (Eigen::Index j = 0; j < M; ++j) {
            if (!(b[j] > 0.0)) {
                gt[j] = 0.0;
                continue;
            }
            col = log_a.array() + (ft.array() - C.col(j).array()) * inv_eps;
            const double m = col.maxCoeff();
            gt[j] = -eps * (m + std::log((col - m).exp().sum()));
        }
        double err = 0.0;
        for (Eigen::Index i = 0; i < N; ++i) {
            if (!(a[i] > 0.0)) {
                P.row(i).setZero();
                r[i] = res[i] = 0.0;
                continue;
            }
            P.row(i) = (log_a[i] + log_b.array() + (ft[i] + gt.array() - C.row(i).transpose().array()) * inv_eps)
                           .exp()
                           .transpose();
            r[i] = P.row(i).sum();
            res[i] = a[i] - r[i];
            err += std::abs(res[i]);
        }
        return std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
    };

    Vector inv_b(M);
    for (Eigen::Index j = 0; j < M; ++j) inv_b[j] = b[j] > 0.0 ? 1.0 / b[j] : 0.0;
    const auto hess = [&](const Vector& x) -> Vector {
        const Vector t = inv_b.cwiseProduct(P.transpose() * x);
        return r.cwiseProduct(x) - P * t;
    };

    Vector gt(M), ft(N);
    double err = evaluate(f, g);
    for (steps = 0; steps < max_steps && err > tol; ++steps) {
        Vector diag = r - (P.array().square().matrix() * inv_b);
        for (Eigen::Index i = 0; i < N; ++i) diag[i] = diag[i] > 1e-300 ? 1.0 / diag[i] : 0.0;
        // Newton on log r = log a, symmetrized: H d = r log(a / r). Near the
        // solution the right side is a - r; far rows get a scaling-like step.
        Vector rhs(N);
        for (Eigen::Index i = 0; i < N; ++i) rhs[i] = a[i] > 0.0 && r[i] > 0.0 ? r[i] * std::log(a[i] / r[i]) : 0.0;
        rhs.array() -= rhs.mean();
        Vector d = Vector::Zero(N), rr = rhs, z = diag.cwiseProduct(rr), p = z;
        double rz = rr.dot(z);
        const double stop = std::min(0.1, std::sqrt(err)) * rhs.norm();
        for (int k = 0; k < 4 * int(N) + 50 && rr.norm() > stop; ++k) {
            const Vector Hp = hess(p);
            const double pHp = p.dot(Hp);
            if (!(pHp > 0.0)) break;
            const double alpha = rz / pHp;
            d += alpha * p;
            rr -= alpha * Hp;
            z = diag.cwiseProduct(rr);
            const double rz_new = rr.dot(z);
            p = z + (rz_new / rz) * p;
            rz = rz_new;
        }
        d *= eps;
        const Vector f0 = f, r0 = r, res0 = res;
        const RowMatrix P0 = P;
        double t = 1.0;
        bool accepted = false;
        for (int ls = 0; ls < 30; ++ls, t *= 0.5) {
            ft = f0 + t * d;
            const double e = evaluate(ft, gt);
            if (e < err) {
                f = ft;
                g = gt;
                err = e;
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            P = P0;
            r = r0;
            res = res0;
            break;
        }
    }
    return err;
}

}  // namespace

double log_sum_exp(const Eigen::Ref<const Vector>& v) {
    const double m = v.maxCoeff();
    if (m == kNegInf) return kNegInf;
    return m + std::log((v.array() - m).exp().sum());
}

RowMatrix cost_matrix(const Matrix& X, const Matrix& Y) {
    if (X.cols() != Y.cols()) throw Error(ErrorCode::DimMismatch, "cost_matrix: point dimensions differ");
    RowMatrix C(X.rows(), Y.rows());
    const Eigen::Index D = X.cols();
    for (Eigen::Index i = 0; i < X.rows(); ++i)
        for (Eigen::Index j = 0; j < Y.rows(); ++j) {
            double s = 0.0;
            for (Eigen::Index d = 0; d < D; ++d) {
                const double t = X(i, d) - Y(j, d);
                s += t * t;
            }
            C(i, j) = s;
        }
    return C;
}

SinkhornSolution sinkhorn_solve(const ParticleCloud& src, const ParticleCloud& dst, const SinkhornConfig& cfg,
                                const WarmStart* warm) {
    if (src.empty() || dst.empty()) throw Error(ErrorCode::InvalidArgument, "sinkhorn: empty cloud");
    if (src.dim() != dst.dim()) throw Error(ErrorCode::DimMismatch, "sinkhorn: source and target dims differ");
    if (!(cfg.epsilon > 0.0)) throw Error(ErrorCode::InvalidArgument, "sinkhorn: epsilon must be positive");
    if (!(cfg.tol > 0.0)) throw Error(ErrorCode::InvalidArgument, "sinkhorn: tol must be positive");

    const Eigen::Index N = src.size(), M = dst.size();
    const double eps = cfg.epsilon;
    const RowMatrix C = cost_matrix(src.points(), dst.points());
    if (!C.allFinite()) throw Error(ErrorCode::NonFiniteCost, "sinkhorn: cost matrix has non-finite entries");
    const RowMatrix CT = C.transpose();

    const Vector& a = src.weights();
    const Vector& b = dst.weights();
    const Vector log_a = safe_log(a);
    const Vector log_b = safe_log(b);

    Vector f = Vector::Zero(N), g = Vector::Zero(M);
    if (warm && warm->f.size() == N && warm->g.size() == M && warm->f.allFinite() && warm->g.allFinite()) {
        f = warm->f;
        g = warm->g;
    }

    const double inv_eps = 1.0 / eps;
    Eigen::ArrayXd buf;
    // Log-domain sweep: g exact for the current f, then f exact for that g.
    const auto log_sweep = [&] {
        soft_min_rows(CT, log_a + f * inv_eps, eps, g, buf);
        for (Eigen::Index j = 0; j < M; ++j)
            if (!(b[j] > 0.0)) g[j] = 0.0;
        soft_min_rows(C, log_b + g * inv_eps, eps, f, buf);
        for (Eigen::Index i = 0; i < N; ++i)
            if (!(a[i] > 0.0)) f[i] = 0.0;
    };

    // Scaling iterations on K = exp((f + g - C) / eps) with (f, g) absorbed;
    // the live potentials are f + eps log u and g + eps log v.
    RowMatrix K(N, M);
    const auto build_kernel = [&] {
        for (Eigen::Index i = 0; i < N; ++i)
            K.row(i) = kernel_line((g.array() - C.row(i).transpose().array() + f[i]) * inv_eps).transpose();
    };
    Vector u = Vector::Ones(N), v = Vector::Ones(M);
    const auto absorb = [&] {
        for (Eigen::Index i = 0; i < N; ++i)
            if (a[i] > 0.0) f[i] += eps * std::log(u[i]);
        for (Eigen::Index j = 0; j < M; ++j)
            if (b[j] > 0.0) g[j] += eps * std::log(v[j]);
        u.setOnes();
        v.setOnes();
    };
    // Lines whose kernel mass underflowed are re-solved in the log domain
    // against the live opposite potential and rebuilt on their own.
    const auto repair_rows = [&](Vector& Kbv) {
        bool any = false;
        for (Eigen::Index i = 0; i < N; ++i) {
            if (!(a[i] > 0.0) || (Kbv[i] > 0.0 && std::isfinite(Kbv[i]))) continue;
            buf = log_b.array() + (g.array() + eps * v.array().log() - C.row(i).transpose().array()) * inv_eps;
            f[i] = -eps * log_sum_exp(buf.matrix());
            u[i] = 1.0;
            K.row(i) = kernel_line((g.array() - C.row(i).transpose().array() + f[i]) * inv_eps).transpose();
            Kbv[i] = K.row(i).dot(b.cwiseProduct(v));
            any = true;
        }
        return any;
    };
    const auto repair_cols = [&](Vector& Kau) {
        bool any = false;
        for (Eigen::Index j = 0; j < M; ++j) {
            if (!(b[j] > 0.0) || (Kau[j] > 0.0 && std::isfinite(Kau[j]))) continue;
            buf = log_a.array() + (f.array() + eps * u.array().log() - CT.row(j).transpose().array()) * inv_eps;
            g[j] = -eps * log_sum_exp(buf.matrix());
            v[j] = 1.0;
            K.col(j) = kernel_line((f.array() - CT.row(j).transpose().array() + g[j]) * inv_eps).matrix();
            Kau[j] = K.col(j).dot(a.cwiseProduct(u));
            any = true;
        }
        return any;
    };
    constexpr double kAbsorbAbove = 1e30;

    const bool warm_ok =
        warm && warm->f.size() == N && warm->g.size() == M && warm->f.allFinite() && warm->g.allFinite();
    if (!warm_ok) log_sweep();
    build_kernel();

    int it = 0;
    bool converged = false;
    // The first v update makes the columns exact before any convergence check.
    bool have_v = false;
    // Newton is retried on a doubling schedule while scaling keeps going.
    int next_newton = cfg.newton_after;
    Vector Kbv(N), Kau(M);
    for (;;) {
        Kbv.noalias() = K * b.cwiseProduct(v);
        const bool repaired = repair_rows(Kbv);
        if (have_v && !repaired) {
            double err = 0.0;
            for (Eigen::Index i = 0; i < N; ++i)
                if (a[i] > 0.0) err += std::abs(a[i] - a[i] * u[i] * Kbv[i]);
            if (err <= cfg.tol) {
                converged = true;
                break;
            }
        }
        if (it >= cfg.max_iters) break;
        if (cfg.newton_after >= 0 && it >= next_newton) {
            next_newton = 2 * std::max(it, 1);
            absorb();
            int steps = 0;
            const double err = newton_polish(C, a, b, log_a, log_b, eps, cfg.tol, 50, f, g, steps);
            it += steps;
            if (err <= cfg.tol) {
                converged = true;
                break;
            }
            // fall back to scaling from wherever Newton got to
            build_kernel();
            have_v = false;
            continue;
        }
        for (Eigen::Index i = 0; i < N; ++i) u[i] = a[i] > 0.0 ? 1.0 / Kbv[i] : 1.0;
        Kau.noalias() = K.transpose() * a.cwiseProduct(u);
        repair_cols(Kau);
        for (Eigen::Index j = 0; j < M; ++j) v[j] = b[j] > 0.0 ? 1.0 / Kau[j] : 1.0;
        have_v = true;
        ++it;
        if (u.maxCoeff() > kAbsorbAbove || v.maxCoeff() > kAbsorbAbove || u.minCoeff() < 1.0 / kAbsorbAbove ||
            v.minCoeff() < 1.0 / kAbsorbAbove) {
            absorb();
            build_kernel();
        }
    }
    absorb();

    const double shift = a.dot(f);
    f.array() -= shift;
    g.array() += shift;

    SinkhornSolution sol{f, g, RowMatrix(N, M), src, dst, eps, it, 0.0, converged};
    for (Eigen::Index i = 0; i < N; ++i)
        sol.log_coupling.row(i) =
            (log_a[i] + log_b.array() + (f[i] + g.array() - C.row(i).transpose().array()) * inv_eps).transpose();
    if (!sol.log_coupling.allFinite()) {
        // Zero-mass atoms carry -inf log entries; keep them finite and negligible.
        sol.log_coupling = sol.log_coupling.unaryExpr([](double v) { return std::isfinite(v) ? v : -1e300; });
    }
    const RowMatrix P = sol.coupling();
    sol.marginal_error = (P.rowwise().sum() - a).cwiseAbs().sum() + (P.colwise().sum().transpose() - b).cwiseAbs().sum();
    return sol;
}

void require_converged(const SinkhornSolution& sol) {
    if (!sol.converged)
        throw Error(ErrorCode::NonConvergence, "sinkhorn did not reach tolerance after " + std::to_string(sol.iterations) +
                                                   " iterations (marginal error " + std::to_string(sol.marginal_error) +
                                                   ")");
}

double entropic_cost(const SinkhornSolution& sol) {
    return sol.source.weights().dot(sol.f) + sol.target.weights().dot(sol.g);
}

double primal_cost(const SinkhornSolution& sol) {
    const RowMatrix C = cost_matrix(sol.source.points(), sol.target.points());
    const Vector& a = sol.source.weights();
    const Vector& b = sol.target.weights();
    double transport = 0.0, kl = 0.0;
    for (Eigen::Index i = 0; i < sol.rows(); ++i)
        for (Eigen::Index j = 0; j < sol.cols(); ++j) {
            const double lp = sol.log_coupling(i, j);
            const double p = std::exp(lp);
            if (p == 0.0) continue;
            transport += p * C(i, j);
            kl += p * (lp - std::log(a[i] * b[j])) - p + a[i] * b[j];
        }
    return transport + sol.epsilon * kl;
}

double sinkhorn_divergence(const ParticleCloud& src, const ParticleCloud& dst, const SinkhornConfig& cfg) {
    const double xy = entropic_cost(sinkhorn_solve(src, dst, cfg));
    const double xx = entropic_cost(sinkhorn_solve(src, src, cfg));
    const double yy = entropic_cost(sinkhorn_solve(dst, dst, cfg));
    return xy - 0.5 * (xx + yy);
}

RowMatrix row_normalized_coupling(const SinkhornSolution& sol) {
    RowMatrix A(sol.rows(), sol.cols());
    for (Eigen::Index i = 0; i < sol.rows(); ++i) {
        const double lse = log_sum_exp(sol.log_coupling.row(i).transpose());
        A.row(i) = (sol.log_coupling.row(i).array() - lse).exp();
    }
    return A;
}

RowMatrix col_normalized_coupling(const SinkhornSolution& sol) {
    RowMatrix B(sol.rows(), sol.cols());
    for (Eigen::Index j = 0; j < sol.cols(); ++j) {
        const double lse = log_sum_exp(sol.log_coupling.col(j));
        B.col(j) = (sol.log_coupling.col(j).array() - lse).exp();
    }
    return B;
}

Matrix potential_gradient_source(const SinkhornSolution& sol) {
    const RowMatrix A = row_normalized_coupling(sol);
    return 2.0 * (sol.source.points() - A * sol.target.points());
}

Matrix potential_gradient_target(const SinkhornSolution& sol) {
    const RowMatrix B = col_normalized_coupling(sol);
    return 2.0 * (sol.target.points() - B.transpose() * sol.source.points());
}

}  // namespace esf
