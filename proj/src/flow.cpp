#include "esf/flow.hpp"

#include "esf/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

namespace esf {

double solver_epsilon(const FlowConfig& cfg) {
    return cfg.epsilon > 0.0 ? cfg.epsilon : cfg.zero_noise_solver_epsilon;
}

double noise_sigma(const FlowConfig& cfg) {
    if (!(cfg.epsilon > 0.0)) return 0.0;
    const double base = cfg.noise_convention == NoiseConvention::Alg1 ? 2.0 * cfg.epsilon * cfg.eta : cfg.epsilon * cfg.eta;
    return cfg.noise_scale * std::sqrt(base);
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(mid), v.end());
    if (v.size() % 2 == 1) return v[mid];
    const double hi = v[mid];
    const double lo = *std::max_element(v.begin(), v.begin() + std::ptrdiff_t(mid));
    return 0.5 * (lo + hi);
}

}  // namespace

std::uint64_t noise_stream_seed(std::uint64_t master, std::uint64_t node, std::uint64_t step) {
    return splitmix64(splitmix64(splitmix64(master) ^ (node + 1)) ^ (step + 0x5851f42d4c957f2dULL));
}

std::vector<SinkhornSolution> solve_edges(const FlowState& state, const CausalGraph& g, const FlowConfig& cfg,
                                          const std::vector<SinkhornSolution>* warm) {
    const auto idx = edge_indices(g);
    SinkhornConfig sc = cfg.sinkhorn;
    sc.epsilon = solver_epsilon(cfg);
    std::vector<SinkhornSolution> sols(g.edges.size());
    parallel_for(g.edges.size(), cfg.threads, [&](std::size_t e) {
        const ParticleCloud pushed = pushforward(state.clouds[std::size_t(idx[e].src)], g.edges[e].mechanism);
        WarmStart ws;
        const WarmStart* wp = nullptr;
        if (warm && e < warm->size()) {
            ws.f = (*warm)[e].f;
            ws.g = (*warm)[e].g;
            wp = &ws;
        }
        sols[e] = sinkhorn_solve(pushed, state.clouds[std::size_t(idx[e].dst)], sc, wp);
    });
    return sols;
}

EnergyReport energy_from_solutions(const CausalGraph& g, const std::vector<SinkhornSolution>& sols,
                                   const FlowConfig& cfg) {
    EnergyReport rep;
    rep.per_edge.reserve(sols.size());
    for (std::size_t e = 0; e < sols.size(); ++e) {
        const double c = entropic_cost(sols[e]);
        rep.per_edge.push_back(c);
        rep.total += g.edges[e].weight * c;
        if (!sols[e].converged) ++rep.unconverged;
    }
    if (cfg.half_energy) rep.total *= 0.5;
    return rep;
}

EnergyReport dirichlet_energy(const FlowState& state, const CausalGraph& g, const FlowConfig& cfg) {
    return energy_from_solutions(g, solve_edges(state, g, cfg), cfg);
}

Matrix node_drift(const FlowState& state, const CausalGraph& g, int node, const std::vector<SinkhornSolution>& sols) {
    const ParticleCloud& cloud = state.clouds.at(std::size_t(node));
    Matrix V = Matrix::Zero(cloud.size(), cloud.dim());
    const auto idx = edge_indices(g);
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
        const double w = g.edges[e].weight;
        if (idx[e].dst == node) V += w * potential_gradient_target(sols[e]);
        if (idx[e].src == node) V += w * g.edges[e].mechanism.vjp_rows(cloud.points(), potential_gradient_source(sols[e]));
    }
    return V;
}

Matrix node_drift(const FlowState& state, const CausalGraph& g, int node, const FlowConfig& cfg) {
    return node_drift(state, g, node, solve_edges(state, g, cfg));
}

FlowState langevin_step(const FlowState& state, const std::vector<Matrix>& drifts, const FlowConfig& cfg,
                        const std::vector<bool>& frozen) {
    if (drifts.size() != state.clouds.size()) throw Error(ErrorCode::DimMismatch, "langevin_step: one drift per node");
    const double sigma = noise_sigma(cfg);
    FlowState next;
    next.step = state.step + 1;
    next.clouds.reserve(state.clouds.size());
    for (std::size_t v = 0; v < state.clouds.size(); ++v) {
        const ParticleCloud& c = state.clouds[v];
        if (v < frozen.size() && frozen[v]) {
            next.clouds.push_back(c);
            continue;
        }
        if (drifts[v].rows() != c.size() || drifts[v].cols() != c.dim())
            throw Error(ErrorCode::DimMismatch, "langevin_step: drift shape differs from cloud");
        Matrix V = drifts[v];
        if (cfg.drift_clip) {
            const double clip = *cfg.drift_clip;
            for (Eigen::Index k = 0; k < V.rows(); ++k) {
                const double n = V.row(k).norm();
                if (n > clip) V.row(k) *= clip / n;
            }
        }
        Matrix X = c.points() - cfg.eta * V;
        if (sigma > 0.0) {
            std::mt19937_64 rng(noise_stream_seed(cfg.seed, v, std::uint64_t(state.step)));
            std::normal_distribution<double> normal(0.0, 1.0);
            for (Eigen::Index k = 0; k < X.rows(); ++k)
                for (Eigen::Index d = 0; d < X.cols(); ++d) X(k, d) += sigma * normal(rng);
        }
        if (!X.allFinite()) {
            // Empty cloud marks the failed node for run_flow to report.
            next.clouds.emplace_back();
            continue;
        }
        next.clouds.emplace_back(std::move(X), c.weights());
    }
    return next;
}

std::vector<NodeDiagnostics> tearing_diagnostics(const FlowState& state) {
    std::vector<NodeDiagnostics> out;
    out.reserve(state.clouds.size());
    for (const auto& c : state.clouds) {
        NodeDiagnostics d;
        d.total_variance = total_variance(c);
        if (c.size() >= 2) {
            const Vector nn = nearest_neighbor_distances(c);
            d.median_nn_distance = median_of(std::vector<double>(nn.data(), nn.data() + nn.size()));
            d.min_nn_distance = nn.minCoeff();
        }
        out.push_back(d);
    }
    return out;
}

namespace {

TraceRow make_row(const FlowState& state, const EnergyReport& energy, const std::vector<Matrix>& drifts) {
    TraceRow row;
    row.step = state.step;
    row.energy = energy.total;
    row.edge_costs = energy.per_edge;
    row.unconverged_edges = energy.unconverged;
    const auto diag = tearing_diagnostics(state);
    for (std::size_t v = 0; v < state.clouds.size(); ++v) {
        const ParticleCloud& c = state.clouds[v];
        row.com.push_back(center_of_mass(c));
        row.variance.push_back(diag[v].total_variance);
        row.nn_median.push_back(diag[v].median_nn_distance);
        row.drift_norms.push_back(drifts[v].rowwise().norm().dot(c.weights()));
    }
    return row;
}

}  // namespace

FlowResult run_flow(const CausalGraph& g, const FlowState& init, const FlowConfig& cfg) {
    validate_graph(g);
    if (!(cfg.eta > 0.0)) throw Error(ErrorCode::InvalidArgument, "flow: eta must be positive");
    if (cfg.steps < 0) throw Error(ErrorCode::InvalidArgument, "flow: steps must be nonnegative");
    if (!(cfg.epsilon >= 0.0)) throw Error(ErrorCode::InvalidArgument, "flow: epsilon must be nonnegative");
    if (init.clouds.size() != g.nodes.size()) throw Error(ErrorCode::DimMismatch, "flow: one cloud per node required");
    for (std::size_t v = 0; v < g.nodes.size(); ++v)
        if (init.clouds[v].dim() != g.nodes[v].dim)
            throw Error(ErrorCode::DimMismatch, "flow: cloud dim differs from node '" + g.nodes[v].name + "'");

    std::vector<bool> frozen(g.nodes.size(), false);
    for (const auto& name : cfg.frozen_nodes) {
        const int i = g.node_index(name);
        if (i < 0) throw Error(ErrorCode::UnknownNode, "frozen node '" + name + "' not in graph");
        frozen[std::size_t(i)] = true;
    }

    FlowResult res;
    res.trace.node_names.reserve(g.nodes.size());
    for (const auto& n : g.nodes) {
        res.trace.node_names.push_back(n.name);
        res.trace.node_dims.push_back(n.dim);
    }
    for (const auto& e : g.edges) res.trace.edge_names.push_back(e.label());

    const int every = std::max(1, cfg.snapshot_every);
    FlowState state = init;
    std::vector<SinkhornSolution> sols;
    for (int t = 0;; ++t) {
        try {
            sols = solve_edges(state, g, cfg, cfg.warm_start && !sols.empty() ? &sols : nullptr);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::NonFiniteCost) throw;
            throw FlowAbort(state.step, "<edge>", res.trace);
        }
        const EnergyReport energy = energy_from_solutions(g, sols, cfg);
        res.unconverged_solves += energy.unconverged;

        std::vector<Matrix> drifts(g.nodes.size());
        parallel_for(g.nodes.size(), cfg.threads, [&](std::size_t v) {
            drifts[v] = frozen[v] ? Matrix::Zero(state.clouds[v].size(), state.clouds[v].dim())
                                  : node_drift(state, g, int(v), sols);
        });

        if (t == 0 || state.step % every == 0 || t == cfg.steps) res.trace.rows.push_back(make_row(state, energy, drifts));
        if (t == cfg.steps) break;

        FlowState next = langevin_step(state, drifts, cfg, frozen);
        for (std::size_t v = 0; v < next.clouds.size(); ++v)
            if (next.clouds[v].empty()) throw FlowAbort(next.step, g.nodes[v].name, res.trace);
        state = std::move(next);
    }
    res.final_state = std::move(state);
    res.final_solutions = std::move(sols);
    return res;
}

std::string format_trace_csv(const EnergyTrace& trace) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "step,total_energy";
    for (const auto& e : trace.edge_names) os << ",edge:" << e << "_cost";
    for (std::size_t v = 0; v < trace.node_names.size(); ++v) {
        const auto& n = trace.node_names[v];
        for (int k = 0; k < trace.node_dims[v]; ++k) os << ",node:" << n << "_com_" << k;
        os << ",node:" << n << "_var,node:" << n << "_nn_median,node:" << n << "_drift_norm";
    }
    os << '\n';
    for (const auto& r : trace.rows) {
        os << r.step << ',' << r.energy;
        for (double c : r.edge_costs) os << ',' << c;
        for (std::size_t v = 0; v < r.com.size(); ++v) {
            for (Eigen::Index k = 0; k < r.com[v].size(); ++k) os << ',' << r.com[v][k];
            os << ',' << r.variance[v] << ',' << r.nn_median[v] << ',' << r.drift_norms[v];
        }
        os << '\n';
    }
    return os.str();
}

void write_trace_csv(const EnergyTrace& trace, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoError, "cannot write '" + path + "'");
    out << format_trace_csv(trace);
}

}  // namespace esf
