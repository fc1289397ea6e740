#pragma once

#include "esf/common.hpp"
#include "esf/flow.hpp"
#include "esf/graph.hpp"
#include "esf/sinkhorn.hpp"

#include <vector>

namespace esf {

/// 0-cochain: one N_v x D_v block of per-particle vectors per node.
struct TangentField {
    std::vector<Matrix> blocks;
};

/// 1-cochain: one N_u x D_v block per edge e = (u, v), attached to the pushed
/// source support {Phi_e(x_k)}.
struct EdgeCochain {
    std::vector<Matrix> blocks;
};

/// The tangent sheaf linearized at a fixed configuration.
///
/// Node spaces carry the L2(mu_v) inner product sum_k a_k <V[k], V'[k]>; edge
/// spaces carry the source weights of their pushed support. The -I block of
/// the coboundary is realized by B_e, the row-normalized entropic plan from
/// Phi_e # mu_u to mu_v, so that
///
///     (dV)_e[k] = J_e(x_k) V_u[k] - sum_l B_e[k, l] V_v[l].
///
/// Aligners are frozen at construction.
class TangentSheaf {
public:
    TangentSheaf(const CausalGraph& g, FlowState state, std::vector<RowMatrix> aligners);

    static TangentSheaf build(const CausalGraph& g, const FlowState& state, const SinkhornConfig& cfg);
    static TangentSheaf from_solutions(const CausalGraph& g, const FlowState& state,
                                       const std::vector<SinkhornSolution>& sols);

    const CausalGraph& graph() const { return *graph_; }
    const FlowState& state() const { return state_; }
    const std::vector<RowMatrix>& aligners() const { return aligners_; }

    EdgeCochain coboundary(const TangentField& V) const;
    TangentField coboundary_adjoint(const EdgeCochain& W) const;
    /// d* d
    TangentField laplacian_apply(const TangentField& V) const;

    double node_inner(const TangentField& U, const TangentField& V) const;
    double edge_inner(const EdgeCochain& U, const EdgeCochain& V) const;

    TangentField zero_field() const;
    EdgeCochain zero_cochain() const;

    Eigen::Index node_space_dim() const;
    Eigen::Index edge_space_dim() const;
    Vector flatten(const TangentField& V) const;
    TangentField unflatten_field(const Vector& v) const;
    Vector flatten(const EdgeCochain& W) const;
    EdgeCochain unflatten_cochain(const Vector& w) const;
    /// Per-entry weights of the flattened inner products.
    Vector node_metric() const;
    Vector edge_metric() const;

private:
    const CausalGraph* graph_;
    FlowState state_;
    std::vector<RowMatrix> aligners_;
    std::vector<EdgeIndex> idx_;
};

struct HarmonicResidual {
    EdgeCochain stress;
    double stationarity = 0.0;  ///< |d* R| / |R|, 0 when |R| vanishes
    double stress_norm = 0.0;
};

/// R_e = w_e * grad f_e on the pushed support of each edge problem.
HarmonicResidual harmonic_residual(const CausalGraph& g, const FlowState& state, const FlowConfig& cfg);
HarmonicResidual harmonic_residual(const TangentSheaf& sheaf, const std::vector<SinkhornSolution>& sols);

enum class Extremal { Max, Min };

struct EigenEstimate {
    double value = 0.0;
    int iterations = 0;
    bool converged = false;
};

/// Power iteration (Max) or shifted inverse iteration with CG solves (Min) on
/// the Laplacian in the weighted node space. Min throws SolverStalled when an
/// inner solve fails.
EigenEstimate extremal_eigen_estimate(const TangentSheaf& sheaf, Extremal which, int iters = 1000,
                                      double shift = 1e-3);

struct HodgeSplit {
    EdgeCochain exact;     ///< d U, U solving d* d U = d* W
    EdgeCochain harmonic;  ///< W - d U, lies in ker d*
    int cg_iterations = 0;
    double cg_residual = 0.0;
};

HodgeSplit hodge_decompose(const TangentSheaf& sheaf, const EdgeCochain& W, double tol = 1e-13, int max_iters = 5000);

}  // namespace esf
