#pragma once

#include "esf/common.hpp"
#include "esf/graph.hpp"
#include "esf/measures.hpp"
#include "esf/sinkhorn.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace esf {

enum class NoiseConvention {
    Alg1,  ///< sigma = sqrt(2 eps eta)
    SDE,   ///< sigma = sqrt(eps eta)
};

struct FlowConfig {
    double eta = 0.01;
    /// Flow temperature. Zero selects the deterministic regime: no noise and
    /// Sinkhorn solves at `zero_noise_solver_epsilon`.
    double epsilon = 0.1;
    int steps = 500;
    NoiseConvention noise_convention = NoiseConvention::Alg1;
    std::uint64_t seed = 0;
    int snapshot_every = 10;
    /// Only max_iters and tol are used; the solver epsilon follows `epsilon`.
    SinkhornConfig sinkhorn{0.1, 2000, 1e-4};
    std::optional<double> drift_clip;
    double zero_noise_solver_epsilon = 0.01;
    /// Multiplies sigma; 0 switches noise off while keeping the solver epsilon.
    double noise_scale = 1.0;
    /// Report 0.5 x the once-per-edge energy.
    bool half_energy = false;
    bool warm_start = true;
    int threads = 1;
    /// Nodes held fixed: no drift, no noise.
    std::vector<std::string> frozen_nodes;
};

double solver_epsilon(const FlowConfig& cfg);
double noise_sigma(const FlowConfig& cfg);

/// Clouds indexed like CausalGraph::nodes.
struct FlowState {
    int step = 0;
    std::vector<ParticleCloud> clouds;
};

struct TraceRow {
    int step = 0;
    double energy = 0.0;
    std::vector<double> edge_costs;
    std::vector<double> drift_norms;  ///< weighted mean per-particle drift norm
    std::vector<Vector> com;
    std::vector<double> variance;
    std::vector<double> nn_median;
    int unconverged_edges = 0;
};

struct EnergyTrace {
    std::vector<std::string> node_names;
    std::vector<std::string> edge_names;
    std::vector<int> node_dims;
    std::vector<TraceRow> rows;
};

struct EnergyReport {
    double total = 0.0;
    std::vector<double> per_edge;  ///< unweighted entropic costs
    int unconverged = 0;
};

/// One Sinkhorn problem per edge: source = Phi_e # mu_u, target = mu_v.
std::vector<SinkhornSolution> solve_edges(const FlowState& state, const CausalGraph& g, const FlowConfig& cfg,
                                          const std::vector<SinkhornSolution>* warm = nullptr);

EnergyReport energy_from_solutions(const CausalGraph& g, const std::vector<SinkhornSolution>& sols,
                                   const FlowConfig& cfg);

/// sum_e w_e OT_eps(Phi_e # mu_u, mu_v), each edge counted once.
EnergyReport dirichlet_energy(const FlowState& state, const CausalGraph& g, const FlowConfig& cfg);

/// Parent side: w * grad g_e on mu_node's support. Child side: w * J^T grad f_e
/// pulled back from the pushed support.
Matrix node_drift(const FlowState& state, const CausalGraph& g, int node, const std::vector<SinkhornSolution>& sols);
Matrix node_drift(const FlowState& state, const CausalGraph& g, int node, const FlowConfig& cfg);

/// X <- X - eta V + sigma xi. Noise for (node, step) is drawn from its own
/// stream derived from the master seed, independent of scheduling.
FlowState langevin_step(const FlowState& state, const std::vector<Matrix>& drifts, const FlowConfig& cfg,
                        const std::vector<bool>& frozen = {});

std::uint64_t noise_stream_seed(std::uint64_t master, std::uint64_t node, std::uint64_t step);

struct NodeDiagnostics {
    double median_nn_distance = 0.0;
    double min_nn_distance = 0.0;
    double total_variance = 0.0;
};

std::vector<NodeDiagnostics> tearing_diagnostics(const FlowState& state);

struct FlowResult {
    FlowState final_state;
    EnergyTrace trace;
    int unconverged_solves = 0;
    std::vector<SinkhornSolution> final_solutions;
};

/// Thrown on non-finite particle coordinates; carries the trace so far.
class FlowAbort : public Error {
public:
    FlowAbort(int step, std::string node, EnergyTrace partial)
        : Error(ErrorCode::FlowAborted, "non-finite coordinates at step " + std::to_string(step) + " in node '" + node + "'"),
          step_(step),
          node_(std::move(node)),
          partial_(std::move(partial)) {}

    int step() const { return step_; }
    const std::string& node() const { return node_; }
    const EnergyTrace& partial_trace() const { return partial_; }

private:
    int step_;
    std::string node_;
    EnergyTrace partial_;
};

FlowResult run_flow(const CausalGraph& g, const FlowState& init, const FlowConfig& cfg);

void write_trace_csv(const EnergyTrace& trace, const std::string& path);
std::string format_trace_csv(const EnergyTrace& trace);

}  // namespace esf
