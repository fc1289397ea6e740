#pragma once

#include "esf/common.hpp"
#include "esf/measures.hpp"

namespace esf {

struct SinkhornConfig {
    double epsilon = 0.1;
    int max_iters = 10000;
    /// l1 tolerance on the row marginal; columns are exact after each sweep.
    double tol = 1e-9;
    /// Scaling sweeps before trying Newton steps on the source potential
    /// (retried after 2x, 4x, ... as many sweeps). Scaling alone stalls far
    /// from tight tolerances when the plan is nearly degenerate. Negative
    /// disables Newton.
    int newton_after = 1000;
};

/// Dual potentials to start from (e.g. the previous flow step's solution).
struct WarmStart {
    Vector f;
    Vector g;
};

struct SinkhornSolution {
    Vector f;  ///< source potential at source atoms, weighted mean pinned to 0
    Vector g;  ///< target potential at target atoms
    RowMatrix log_coupling;
    ParticleCloud source;
    ParticleCloud target;
    double epsilon = 0.0;
    int iterations = 0;
    /// l1 row error + l1 column error of exp(log_coupling).
    double marginal_error = 0.0;
    bool converged = false;

    RowMatrix coupling() const { return log_coupling.array().exp().matrix(); }
    Eigen::Index rows() const { return log_coupling.rows(); }
    Eigen::Index cols() const { return log_coupling.cols(); }
};

/// C_ij = |x_i - y_j|^2, evaluated coordinate-wise (no expansion).
RowMatrix cost_matrix(const Matrix& X, const Matrix& Y);

/// Log-domain alternating Sinkhorn. Never throws on non-convergence: the
/// best iterate is returned with converged = false.
SinkhornSolution sinkhorn_solve(const ParticleCloud& src, const ParticleCloud& dst, const SinkhornConfig& cfg,
                                const WarmStart* warm = nullptr);

/// Throws NonConvergence when the solution is flagged.
void require_converged(const SinkhornSolution& sol);

/// Dual objective sum_i a_i f_i + sum_j b_j g_j.
double entropic_cost(const SinkhornSolution& sol);

/// sum_ij P_ij C_ij + eps KL(P | a x b).
double primal_cost(const SinkhornSolution& sol);

/// OT(a,b) - OT(a,a)/2 - OT(b,b)/2. Diagnostic only.
double sinkhorn_divergence(const ParticleCloud& src, const ParticleCloud& dst, const SinkhornConfig& cfg);

/// Row i = grad of the smooth extension of f at x_i: 2 sum_j pi_j(x_i) (x_i - y_j),
/// with pi(x_i) the row of the coupling normalized to a probability vector.
Matrix potential_gradient_source(const SinkhornSolution& sol);

/// Row j = 2 sum_i pi_i(y_j) (y_j - x_i), column-normalized.
Matrix potential_gradient_target(const SinkhornSolution& sol);

/// Row-normalized coupling, P_ij / sum_j P_ij.
RowMatrix row_normalized_coupling(const SinkhornSolution& sol);
/// Column-normalized coupling, P_ij / sum_i P_ij (still N x M).
RowMatrix col_normalized_coupling(const SinkhornSolution& sol);

double log_sum_exp(const Eigen::Ref<const Vector>& v);

}  // namespace esf
