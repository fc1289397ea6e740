#pragma once

#include "esf/flow.hpp"
#include "esf/graph.hpp"
#include "esf/measures.hpp"

#include <map>
#include <string>
#include <vector>

namespace esf {

struct Candidate {
    std::string label;
    CausalGraph graph;
};

struct CandidateSet {
    std::map<std::string, ParticleCloud> data;
    std::vector<Candidate> candidates;
};

struct ScoreResult {
    double score = 0.0;  ///< tail mean of the recorded total energy
    double tail_std = 0.0;
    int tail_rows = 0;
    bool converged = true;  ///< false when tail std / tail mean > 0.2
    EnergyTrace trace;
};

/// Flows the observational clouds under g and averages the energy over the
/// last `tail` recorded rows.
ScoreResult topological_score(const CausalGraph& g, const std::map<std::string, ParticleCloud>& data,
                              const FlowConfig& cfg, int tail = 20);

struct ScoreEntry {
    std::string label;
    ScoreResult result;
    bool failed = false;
    std::string error;
    double gap_ratio = 1.0;  ///< score / best score
};

struct ScoreReport {
    /// Ascending by score; failed candidates last, in input order.
    std::vector<ScoreEntry> entries;
};

/// Every candidate runs with the same cfg (and seed). Candidates are scored
/// on up to cfg.threads workers; each flow itself runs single-threaded.
ScoreReport rank_candidates(const CandidateSet& cs, const FlowConfig& cfg, int tail = 20);

}  // namespace esf
