#pragma once

#include "esf/config.hpp"
#include "esf/discovery.hpp"
#include "esf/flow.hpp"
#include "esf/implicit_diff.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace esf {

// ---- run / demo2d ---------------------------------------------------------

struct RunSummary {
    double initial_energy = 0.0;
    double final_energy = 0.0;
    double reduction_pct = 0.0;
    double wallclock_s = 0.0;
    int steps = 0;
    int unconverged_solves = 0;
    std::vector<std::string> node_names;
    std::vector<Vector> com_initial;
    std::vector<Vector> com_final;
    std::vector<Vector> com_shift;
    std::vector<double> final_variance;
};

struct HodgeProbe {
    double stationarity_initial = 0.0;
    double stationarity_final = 0.0;
    double lambda_max = 0.0;
    double lambda_min = 0.0;
    bool lambda_min_stalled = false;
    int quench_steps = 0;
};

struct RunOutcome {
    FlowState initial;
    FlowResult flow;
    RunSummary summary;
    std::optional<HodgeProbe> hodge;
};

/// Builds the initial state from the config and runs the flow. With
/// cfg.hodge the last hodge_quench steps run noise-free and the stationarity
/// and extremal eigenvalue probes are evaluated at both ends.
RunOutcome run_flow_experiment(const ExperimentConfig& cfg);

Json summary_json(const RunOutcome& out);
void write_run_artifacts(const RunOutcome& out, const std::string& dir);

// ---- bench-ift ------------------------------------------------------------

struct BenchRow {
    int n = 0;
    int iterations = 0;
    double epsilon = 0.0;
    double grad_err_envelope = 0.0;
    double grad_err_ift = 0.0;
    double grad_err_unrolled = 0.0;
    std::size_t tape_cells = 0;
    std::size_t ift_cells = 0;
    double wall_ms = 0.0;  ///< unrolled forward + reverse
    double ift_wall_ms = 0.0;
    int loose_iterations = 0;
    bool stalled = false;
};

/// Central differences of entropic_cost with tightly converged re-solves.
PositionGradients fd_gradient(const ParticleCloud& src, const ParticleCloud& dst, double epsilon, double h = 1e-5,
                              double tol = 1e-13);

/// sum |g - ref| / sum |ref| over both position blocks.
double l1_relative_error(const PositionGradients& g, const PositionGradients& ref);

/// Random instance for bench cells: source ~ N(0, I), target ~ N(0.5, I).
std::pair<ParticleCloud, ParticleCloud> bench_instance(int n, int dim, std::uint64_t seed);

std::vector<BenchRow> run_bench(const BenchSpec& spec, std::uint64_t seed, int threads = 1);
Json bench_json(const std::vector<BenchRow>& rows);

// ---- tear -----------------------------------------------------------------

struct TearRun {
    double epsilon = 0.0;
    bool aborted = false;
    int abort_step = -1;
    std::string abort_node;
    EnergyTrace trace;
    bool finite_energies = true;
    int completed_steps = 0;
    double final_nn_median = 0.0;  ///< mean over nodes of the last recorded row
    double final_variance = 0.0;   ///< mean over nodes of the last recorded row
};

struct TearSeed {
    std::uint64_t seed = 0;
    TearRun cold;
    TearRun warm;
    double final_nn_ratio = 0.0;
    double variance_ratio = 0.0;
};

std::vector<TearSeed> run_tear(const ExperimentConfig& cfg);
Json tear_json(const std::vector<TearSeed>& seeds);

// ---- kramers --------------------------------------------------------------

struct KramersCell {
    double epsilon = 0.0;
    std::vector<int> tau;        ///< censored runs hold max_steps
    std::vector<bool> censored;
    double mean_tau = 0.0;
    double std_tau = 0.0;
    int censored_count = 0;
    double eps_log_tau = 0.0;
    bool fully_censored = false;
};

CausalGraph kramers_graph(const KramersSpec& k);
FlowState kramers_initial_state(const KramersSpec& k, std::uint64_t seed);
/// Steps until the center of mass of X reaches the threshold, or max_steps.
int kramers_hitting_time(const KramersSpec& k, double epsilon, std::uint64_t seed, bool* censored);

std::vector<KramersCell> run_kramers(const KramersSpec& k, std::uint64_t seed, int threads = 1);
Json kramers_json(const std::vector<KramersCell>& cells);

// ---- score ----------------------------------------------------------------

struct ScoreRun {
    std::uint64_t seed = 0;
    ScoreReport report;
};

CandidateSet build_candidate_set(const ScoreSpec& spec, int particles, std::uint64_t seed);
std::vector<ScoreRun> run_score(const ExperimentConfig& cfg);
Json score_json(const std::vector<ScoreRun>& runs);

// ---- io -------------------------------------------------------------------

void write_json(const Json& j, const std::string& path);
void write_text(const std::string& text, const std::string& path);

}  // namespace esf
