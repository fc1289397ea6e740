#pragma once

#include "esf/flow.hpp"
#include "esf/graph.hpp"
#include "esf/measures.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace esf {

using Json = nlohmann::ordered_json;

struct CloudInit {
    enum class Kind { Gaussian, File };
    Kind kind = Kind::Gaussian;
    Vector mean;
    Vector cov_diag;
    int n = 0;  ///< 0: use the experiment's particle count
    std::string path;
};

struct BenchSpec {
    std::vector<int> n{10, 20, 40};
    std::vector<int> iterations{10, 100, 1000};
    std::vector<double> epsilon{0.5};
    double loose_tol = 1e-2;
    int dim = 2;
};

/// One dynamic 1-D node X pulled by two frozen single-atom anchors at -anchor
/// and +anchor through mirrored residual mechanisms; the induced potential on
/// X is a symmetric double well.
struct KramersSpec {
    std::vector<double> epsilon{0.4, 0.2, 0.1};
    int seeds = 20;
    double threshold = 0.0;
    int max_steps = 10000;
    int n = 100;
    double eta = 0.02;
    double start_mean = -0.387;
    double start_std = 0.05;
    double anchor = 2.0;
    double width = 3.0;
    double bias = 0.9;
    double offset = 2.0;
    double scale = 0.9;
};

struct TearSpec {
    double cold_epsilon = 0.0;
    double warm_epsilon = 0.1;
    int seeds = 5;
};

struct ScoreCandidateSpec {
    std::string label;
    CausalGraph graph;
};

struct ScoreSpec {
    std::vector<ScoreCandidateSpec> candidates;
    std::vector<std::pair<std::string, CloudInit>> data;
    int tail = 20;
    int seeds = 1;
};

struct ExperimentConfig {
    std::string experiment;
    std::uint64_t seed = 0;
    int particles = 300;
    int threads = 1;
    bool hodge = false;
    int hodge_quench = 50;
    CausalGraph graph;
    std::vector<std::pair<std::string, CloudInit>> init;
    FlowConfig flow;
    BenchSpec bench;
    KramersSpec kramers;
    TearSpec tear;
    ScoreSpec score;
    Json resolved;  ///< the merged document this config was parsed from
};

const std::vector<std::string>& experiment_names();

/// Built-in configuration for an experiment; `run` has an empty graph.
Json default_config(const std::string& experiment);

/// Objects merge key by key; everything else is replaced.
void merge_json(Json& base, const Json& patch);

/// key.path=value; the value is parsed as JSON, falling back to a string.
void apply_override(Json& doc, const std::string& assignment);
void set_path(Json& doc, const std::string& dotted, Json value);

/// Schema validation and conversion. Throws Error(ConfigError) whose message
/// starts with the offending key path; unknown keys are rejected.
ExperimentConfig parse_experiment_config(const Json& doc);

Mechanism parse_mechanism(const Json& j, const std::string& path);
CausalGraph parse_graph(const Json& j, const std::string& path);

Json load_json_file(const std::string& path);

/// Samples (or loads) the initial clouds in graph node order. Per-node
/// sampling seeds derive from `seed` and the node's position in `specs`.
FlowState build_initial_state(const CausalGraph& g, const std::vector<std::pair<std::string, CloudInit>>& specs,
                              int particles, std::uint64_t seed);

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b);

}  // namespace esf
