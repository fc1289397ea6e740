#include "esf/discovery.hpp"

#include "esf/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace esf {

ScoreResult topological_score(const CausalGraph& g, const std::map<std::string, ParticleCloud>& data,
                              const FlowConfig& cfg, int tail) {
    if (tail < 1) throw Error(ErrorCode::InvalidArgument, "score: tail must be at least 1");
    FlowState init;
    for (const auto& n : g.nodes) {
        auto it = data.find(n.name);
        if (it == data.end()) throw Error(ErrorCode::UnknownNode, "score: no data for node '" + n.name + "'");
        if (it->second.dim() != n.dim)
            throw Error(ErrorCode::DimMismatch, "score: data for node '" + n.name + "' has the wrong dimension");
        init.clouds.push_back(it->second);
    }

    ScoreResult out;
    FlowResult fr = run_flow(g, init, cfg);
    const auto& rows = fr.trace.rows;
    const std::size_t k = std::min<std::size_t>(rows.size(), std::size_t(tail));
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = rows.size() - k; i < rows.size(); ++i) sum += rows[i].energy;
    const double mean = sum / double(k);
    for (std::size_t i = rows.size() - k; i < rows.size(); ++i) sq += (rows[i].energy - mean) * (rows[i].energy - mean);
    out.score = mean;
    out.tail_std = k > 1 ? std::sqrt(sq / double(k - 1)) : 0.0;
    out.tail_rows = int(k);
    out.converged = !(mean > 0.0) || out.tail_std / mean <= 0.2;
    out.trace = std::move(fr.trace);
    return out;
}

ScoreReport rank_candidates(const CandidateSet& cs, const FlowConfig& cfg, int tail) {
    if (cs.candidates.empty()) throw Error(ErrorCode::InvalidArgument, "rank: no candidates");
    std::vector<ScoreEntry> entries(cs.candidates.size());
    FlowConfig inner = cfg;
    inner.threads = 1;
    parallel_for(cs.candidates.size(), cfg.threads, [&](std::size_t i) {
        entries[i].label = cs.candidates[i].label;
        try {
            entries[i].result = topological_score(cs.candidates[i].graph, cs.data, inner, tail);
        } catch (const Error& e) {
            entries[i].failed = true;
            entries[i].error = e.what();
            entries[i].result.score = std::numeric_limits<double>::quiet_NaN();
        }
    });

    std::stable_sort(entries.begin(), entries.end(), [](const ScoreEntry& a, const ScoreEntry& b) {
        if (a.failed != b.failed) return !a.failed;
        if (a.failed) return false;
        return a.result.score < b.result.score;
    });
    if (!entries.front().failed) {
        const double best = entries.front().result.score;
        for (auto& e : entries) {
            if (e.failed) {
                e.gap_ratio = std::numeric_limits<double>::quiet_NaN();
            } else if (best > 0.0) {
                e.gap_ratio = e.result.score / best;
            } else {
                e.gap_ratio = e.result.score > best ? std::numeric_limits<double>::infinity() : 1.0;
            }
        }
    }
    return ScoreReport{std::move(entries)};
}

}  // namespace esf
