#pragma once

#include "esf/common.hpp"
#include "esf/sinkhorn.hpp"

#include <cstddef>

namespace esf {

/// Jacobian of the Sinkhorn fixed-point map F(f, g) = 0 with respect to the
/// stacked potentials (f, g):
///
///     H = [[I, A], [B, I]],  A = diag(r)^-1 P,  B = diag(c)^-1 P^T
///
/// where r, c are the row and column masses of the plan P. H is singular along
/// the gauge direction (1, -1). It is applied matrix-free from P; the
/// symmetric form S = diag(r, c) H is what the conjugate-gradient solves see.
class OptimalityJacobian {
public:
    explicit OptimalityJacobian(const SinkhornSolution& sol);

    Eigen::Index n() const { return P_.rows(); }
    Eigen::Index m() const { return P_.cols(); }
    Eigen::Index size() const { return n() + m(); }

    const RowMatrix& plan() const { return P_; }
    const Vector& row_mass() const { return r_; }
    const Vector& col_mass() const { return c_; }

    Vector apply(const Vector& v) const;
    Vector apply_transpose(const Vector& v) const;
    /// S v, S = [[diag(r), P], [P^T, diag(c)]], symmetric PSD.
    Vector apply_symmetric(const Vector& v) const;
    /// D^-1/2 S D^-1/2 v: symmetric, same spectrum as H.
    Vector apply_normalized(const Vector& v) const;

    /// Dense H. Tests only.
    Matrix dense() const;

private:
    RowMatrix P_;
    Vector r_;
    Vector c_;
};

enum class AdjointSolver { CG, Neumann };

struct AdjointOptions {
    AdjointSolver solver = AdjointSolver::CG;
    /// Relative residual target |H^T lambda - rhs| <= tol |rhs|.
    double tol = 1e-12;
    int max_iters = 2000;
    int neumann_terms = 50;
};

struct AdjointResult {
    Vector lambda_f;
    Vector lambda_g;
    int iterations = 0;
    double residual = 0.0;
};

/// Solves H^T lambda = (cot_f, cot_g) after projecting the right-hand side
/// onto range(H^T) (orthogonal to (1, -1)). The returned lambda is the
/// minimum-norm solution, i.e. orthogonal to ker(H^T) = (r, -c).
/// Throws SolverStalled when the residual target is missed.
AdjointResult ift_adjoint_solve(const SinkhornSolution& sol, const Vector& cot_f, const Vector& cot_g,
                                const AdjointOptions& opts = {});

struct PositionGradients {
    Matrix gX;
    Matrix gY;
};

/// Counts scalar cells kept alive for a reverse pass.
struct TapeCounter {
    std::size_t cells_stored = 0;
    int iterations = 0;
};

/// 2 sum_j P_ij (x_i - y_j) and its mirror: the explicit partial of the dual
/// objective at the stored plan.
PositionGradients grad_positions_envelope(const SinkhornSolution& sol);

struct IftGradients {
    PositionGradients grad;
    AdjointResult adjoint;
    TapeCounter retained;
};

/// Envelope term plus the correction carried by the residual marginals through
/// the adjoint solve. The correction vanishes at an exact fixed point.
IftGradients grad_positions_ift(const SinkhornSolution& sol, const AdjointOptions& opts = {});

struct UnrolledGradients {
    PositionGradients grad;
    TapeCounter tape;
    double value = 0.0;  ///< <a, f_L> + <b, g_L>
};

/// Exactly `iterations` alternating updates from f = g = 0, reverse-mode
/// differentiated. The tape holds one N x M log-softmax block and the two
/// potential vectors per iteration.
UnrolledGradients unrolled_grad(const ParticleCloud& src, const ParticleCloud& dst, double epsilon, int iterations);

struct ConditionEstimate {
    double kappa = 1.0;
    double lambda_max = 0.0;
    double lambda_min = 0.0;
    int iterations = 0;
    bool stalled = false;  ///< lambda_min solve failed; kappa reported as +inf
};

/// kappa = lambda_max / lambda_min of H restricted to the complement of its
/// gauge kernel. Power iteration for the top end, inverse iteration with CG
/// solves for the bottom end.
ConditionEstimate hessian_condition_estimate(const SinkhornSolution& sol, int iters = 500);

}  // namespace esf
