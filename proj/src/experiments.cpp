#include "esf/experiments.hpp"

#include "esf/hodge.hpp"
#include "esf/implicit_diff.hpp"
#include "esf/parallel.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

namespace esf {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

Json vec_json(const Vector& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

// JSON has no inf/nan; emit null instead of letting the writer guess.
Json num(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

}  // namespace

void write_text(const std::string& text, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoError, "cannot write '" + path + "'");
    out << text;
}

void write_json(const Json& j, const std::string& path) { write_text(j.dump(2) + "\n", path); }

// ---- run / demo2d ---------------------------------------------------------

RunOutcome run_flow_experiment(const ExperimentConfig& cfg) {
    validate_graph(cfg.graph);
    RunOutcome out;
    out.initial = build_initial_state(cfg.graph, cfg.init, cfg.particles, cfg.seed);
    const auto t0 = Clock::now();

    const FlowConfig& fc = cfg.flow;
    const int quench = cfg.hodge ? std::min(cfg.hodge_quench, fc.steps) : 0;
    if (quench > 0) {
        FlowConfig first = fc;
        first.steps = fc.steps - quench;
        FlowResult a = run_flow(cfg.graph, out.initial, first);
        FlowConfig second = fc;
        second.steps = quench;
        second.noise_scale = 0.0;
        FlowResult b = run_flow(cfg.graph, a.final_state, second);
        out.flow = std::move(b);
        // b's first row repeats a's last one.
        auto& rows = a.trace.rows;
        rows.insert(rows.end(), out.flow.trace.rows.begin() + 1, out.flow.trace.rows.end());
        out.flow.trace.rows = std::move(rows);
        out.flow.unconverged_solves += a.unconverged_solves;
    } else {
        out.flow = run_flow(cfg.graph, out.initial, fc);
    }

    RunSummary& s = out.summary;
    s.wallclock_s = ms_since(t0) / 1000.0;
    s.steps = out.flow.final_state.step;
    s.unconverged_solves = out.flow.unconverged_solves;
    s.initial_energy = out.flow.trace.rows.front().energy;
    s.final_energy = out.flow.trace.rows.back().energy;
    s.reduction_pct = s.initial_energy > 0.0 ? 100.0 * (s.initial_energy - s.final_energy) / s.initial_energy : 0.0;
    for (std::size_t v = 0; v < cfg.graph.nodes.size(); ++v) {
        s.node_names.push_back(cfg.graph.nodes[v].name);
        s.com_initial.push_back(center_of_mass(out.initial.clouds[v]));
        s.com_final.push_back(center_of_mass(out.flow.final_state.clouds[v]));
        s.com_shift.push_back(s.com_final.back() - s.com_initial.back());
        s.final_variance.push_back(total_variance(out.flow.final_state.clouds[v]));
    }

    if (cfg.hodge) {
        HodgeProbe p;
        p.quench_steps = quench;
        p.stationarity_initial = harmonic_residual(cfg.graph, out.initial, fc).stationarity;
        const TangentSheaf sheaf = TangentSheaf::from_solutions(cfg.graph, out.flow.final_state, out.flow.final_solutions);
        p.stationarity_final = harmonic_residual(sheaf, out.flow.final_solutions).stationarity;
        p.lambda_max = extremal_eigen_estimate(sheaf, Extremal::Max, 500).value;
        try {
            p.lambda_min = extremal_eigen_estimate(sheaf, Extremal::Min, 200).value;
        } catch (const Error& e) {
            if (e.code() != ErrorCode::SolverStalled) throw;
            p.lambda_min_stalled = true;
            p.lambda_min = std::numeric_limits<double>::quiet_NaN();
        }
        out.hodge = p;
    }
    return out;
}

Json summary_json(const RunOutcome& out) {
    const RunSummary& s = out.summary;
    Json com_shifts = Json::object(), com_final = Json::object(), variance = Json::object();
    for (std::size_t v = 0; v < s.node_names.size(); ++v) {
        com_shifts[s.node_names[v]] = vec_json(s.com_shift[v]);
        com_final[s.node_names[v]] = vec_json(s.com_final[v]);
        variance[s.node_names[v]] = num(s.final_variance[v]);
    }
    Json j{{"initial_energy", num(s.initial_energy)},
           {"final_energy", num(s.final_energy)},
           {"reduction_pct", num(s.reduction_pct)},
           {"com_shifts", com_shifts},
           {"com_final", com_final},
           {"final_variance", variance},
           {"steps", s.steps},
           {"unconverged_solves", s.unconverged_solves},
           {"wallclock", s.wallclock_s}};
    if (out.hodge) {
        const HodgeProbe& p = *out.hodge;
        j["hodge"] = Json{{"stationarity_initial", num(p.stationarity_initial)},
                          {"stationarity_final", num(p.stationarity_final)},
                          {"lambda_max", num(p.lambda_max)},
                          {"lambda_min", num(p.lambda_min)},
                          {"lambda_min_stalled", p.lambda_min_stalled},
                          {"quench_steps", p.quench_steps}};
    }
    return j;
}

void write_run_artifacts(const RunOutcome& out, const std::string& dir) {
    write_trace_csv(out.flow.trace, dir + "/trace.csv");
    for (std::size_t v = 0; v < out.summary.node_names.size(); ++v)
        store_cloud(out.flow.final_state.clouds[v], dir + "/final_" + out.summary.node_names[v] + ".csv");
    write_json(summary_json(out), dir + "/summary.json");
}

// ---- bench-ift ------------------------------------------------------------

PositionGradients fd_gradient(const ParticleCloud& src, const ParticleCloud& dst, double epsilon, double h, double tol) {
    const SinkhornConfig sc{epsilon, 200000, tol};
    const SinkhornSolution base = sinkhorn_solve(src, dst, sc);
    const WarmStart ws{base.f, base.g};
    const auto cost_with = [&](const Matrix& X, const Matrix& Y) {
        return entropic_cost(sinkhorn_solve(ParticleCloud(X, src.weights()), ParticleCloud(Y, dst.weights()), sc, &ws));
    };
    PositionGradients g{Matrix::Zero(src.size(), src.dim()), Matrix::Zero(dst.size(), dst.dim())};
    for (Eigen::Index i = 0; i < src.size(); ++i)
        for (int d = 0; d < src.dim(); ++d) {
            Matrix Xp = src.points(), Xm = src.points();
            Xp(i, d) += h;
            Xm(i, d) -= h;
            g.gX(i, d) = (cost_with(Xp, dst.points()) - cost_with(Xm, dst.points())) / (2.0 * h);
        }
    for (Eigen::Index j = 0; j < dst.size(); ++j)
        for (int d = 0; d < dst.dim(); ++d) {
            Matrix Yp = dst.points(), Ym = dst.points();
            Yp(j, d) += h;
            Ym(j, d) -= h;
            g.gY(j, d) = (cost_with(src.points(), Yp) - cost_with(src.points(), Ym)) / (2.0 * h);
        }
    return g;
}

double l1_relative_error(const PositionGradients& g, const PositionGradients& ref) {
    const double num_ = (g.gX - ref.gX).cwiseAbs().sum() + (g.gY - ref.gY).cwiseAbs().sum();
    const double den = ref.gX.cwiseAbs().sum() + ref.gY.cwiseAbs().sum();
    return den > 0.0 ? num_ / den : num_;
}

std::pair<ParticleCloud, ParticleCloud> bench_instance(int n, int dim, std::uint64_t seed) {
    return {sample_gaussian(Vector::Zero(dim), Vector::Ones(dim), n, derive_seed(seed, 0, 0)),
            sample_gaussian(Vector::Constant(dim, 0.5), Vector::Ones(dim), n, derive_seed(seed, 1, 0))};
}

std::vector<BenchRow> run_bench(const BenchSpec& spec, std::uint64_t seed, int threads) {
    struct Cell {
        int n;
        double eps;
        std::size_t eps_index;
    };
    std::vector<Cell> cells;
    for (std::size_t e = 0; e < spec.epsilon.size(); ++e)
        for (int n : spec.n) cells.push_back({n, spec.epsilon[e], e});

    std::vector<std::vector<BenchRow>> out(cells.size());
    parallel_for(cells.size(), threads, [&](std::size_t c) {
        const Cell& cell = cells[c];
        const auto [src, dst] = bench_instance(cell.n, spec.dim, derive_seed(seed, std::uint64_t(cell.n), cell.eps_index));
        const PositionGradients oracle = fd_gradient(src, dst, cell.eps);

        const SinkhornSolution loose = sinkhorn_solve(src, dst, SinkhornConfig{cell.eps, 200000, spec.loose_tol});
        const double err_env = l1_relative_error(grad_positions_envelope(loose), oracle);
        double err_ift = std::numeric_limits<double>::quiet_NaN();
        std::size_t ift_cells = 0;
        bool stalled = false;
        const auto t_ift = Clock::now();
        try {
            const IftGradients ift = grad_positions_ift(loose);
            err_ift = l1_relative_error(ift.grad, oracle);
            ift_cells = ift.retained.cells_stored;
        } catch (const Error& e) {
            if (e.code() != ErrorCode::SolverStalled) throw;
            stalled = true;
        }
        const double ift_ms = ms_since(t_ift);

        for (int L : spec.iterations) {
            BenchRow row;
            row.n = cell.n;
            row.iterations = L;
            row.epsilon = cell.eps;
            row.grad_err_envelope = err_env;
            row.grad_err_ift = err_ift;
            row.ift_cells = ift_cells;
            row.ift_wall_ms = ift_ms;
            row.loose_iterations = loose.iterations;
            row.stalled = stalled;
            const auto t0 = Clock::now();
            const UnrolledGradients u = unrolled_grad(src, dst, cell.eps, L);
            row.wall_ms = ms_since(t0);
            row.grad_err_unrolled = l1_relative_error(u.grad, oracle);
            row.tape_cells = u.tape.cells_stored;
            out[c].push_back(row);
        }
    });
    std::vector<BenchRow> rows;
    for (auto& v : out) rows.insert(rows.end(), v.begin(), v.end());
    return rows;
}

Json bench_json(const std::vector<BenchRow>& rows) {
    Json arr = Json::array();
    for (const auto& r : rows)
        arr.push_back(Json{{"N", r.n},
                           {"L", r.iterations},
                           {"epsilon", r.epsilon},
                           {"grad_err_envelope", num(r.grad_err_envelope)},
                           {"grad_err_ift", num(r.grad_err_ift)},
                           {"grad_err_unrolled", num(r.grad_err_unrolled)},
                           {"tape_cells", r.tape_cells},
                           {"ift_cells", r.ift_cells},
                           {"wall_ms", r.wall_ms},
                           {"ift_wall_ms", r.ift_wall_ms},
                           {"loose_iterations", r.loose_iterations},
                           {"stalled", r.stalled}});
    return Json{{"rows", arr}};
}

// ---- tear -----------------------------------------------------------------

namespace {

TearRun tear_run(const CausalGraph& g, const FlowState& init, FlowConfig fc, double epsilon) {
    TearRun r;
    r.epsilon = epsilon;
    fc.epsilon = epsilon;
    try {
        r.trace = run_flow(g, init, fc).trace;
    } catch (const FlowAbort& a) {
        r.aborted = true;
        r.abort_step = a.step();
        r.abort_node = a.node();
        r.trace = a.partial_trace();
    }
    for (const auto& row : r.trace.rows) r.finite_energies = r.finite_energies && std::isfinite(row.energy);
    if (!r.trace.rows.empty()) {
        const TraceRow& last = r.trace.rows.back();
        r.completed_steps = r.aborted ? r.abort_step : last.step;
        double nn = 0.0, var = 0.0;
        for (std::size_t v = 0; v < last.nn_median.size(); ++v) {
            nn += last.nn_median[v];
            var += last.variance[v];
        }
        const double k = double(std::max<std::size_t>(1, last.nn_median.size()));
        r.final_nn_median = nn / k;
        r.final_variance = var / k;
    }
    return r;
}

}  // namespace

std::vector<TearSeed> run_tear(const ExperimentConfig& cfg) {
    validate_graph(cfg.graph);
    std::vector<TearSeed> out(std::size_t(cfg.tear.seeds));
    FlowConfig fc = cfg.flow;
    fc.threads = 1;
    parallel_for(out.size(), cfg.threads, [&](std::size_t s) {
        TearSeed& t = out[s];
        t.seed = cfg.seed + s;
        const FlowState init = build_initial_state(cfg.graph, cfg.init, cfg.particles, t.seed);
        FlowConfig f = fc;
        f.seed = t.seed;
        t.cold = tear_run(cfg.graph, init, f, cfg.tear.cold_epsilon);
        t.warm = tear_run(cfg.graph, init, f, cfg.tear.warm_epsilon);
        t.final_nn_ratio = t.cold.final_nn_median / t.warm.final_nn_median;
        t.variance_ratio = t.cold.final_variance / t.warm.final_variance;
    });
    return out;
}

Json tear_json(const std::vector<TearSeed>& seeds) {
    Json arr = Json::array();
    int below = 0;
    for (const auto& t : seeds) {
        if (t.final_nn_ratio < 1.0) ++below;
        const auto run = [](const TearRun& r) {
            return Json{{"epsilon", r.epsilon},
                        {"aborted", r.aborted},
                        {"abort_step", r.abort_step},
                        {"abort_node", r.abort_node},
                        {"completed_steps", r.completed_steps},
                        {"finite_energies", r.finite_energies},
                        {"final_nn_median", num(r.final_nn_median)},
                        {"final_variance", num(r.final_variance)}};
        };
        arr.push_back(Json{{"seed", t.seed},
                           {"final_nn_ratio", num(t.final_nn_ratio)},
                           {"variance_ratio", num(t.variance_ratio)},
                           {"cold", run(t.cold)},
                           {"warm", run(t.warm)}});
    }
    const TearSeed& first = seeds.front();
    return Json{{"final_nn_ratio", num(first.final_nn_ratio)},
                {"variance_ratio", num(first.variance_ratio)},
                {"seeds_nn_ratio_below_one", below},
                {"seed_count", seeds.size()},
                {"runs", arr}};
}

// ---- kramers --------------------------------------------------------------

CausalGraph kramers_graph(const KramersSpec& k) {
    CausalGraph g;
    g.nodes = {{"X", 1}, {"L", 1}, {"R", 1}};
    const auto arm = [&](double sign) {
        Matrix W1(1, 1), W2(1, 1);
        W1(0, 0) = k.width;
        W2(0, 0) = 1.0;
        Vector b1(1), shift(1);
        b1[0] = sign * k.bias;
        shift[0] = sign * (k.offset + k.anchor);
        return make_composite({make_smooth_residual(W1, W2, b1, k.scale), make_shift(shift)});
    };
    g.edges.push_back(EdgeSpec{"X", "L", arm(-1.0), 1.0});
    g.edges.push_back(EdgeSpec{"X", "R", arm(1.0), 1.0});
    validate_graph(g);
    return g;
}

FlowState kramers_initial_state(const KramersSpec& k, std::uint64_t seed) {
    FlowState s;
    s.clouds.push_back(sample_gaussian(Vector::Constant(1, k.start_mean), Vector::Constant(1, k.start_std * k.start_std),
                                       k.n, derive_seed(seed, 0, 7)));
    s.clouds.emplace_back(Matrix::Constant(1, 1, -k.anchor));
    s.clouds.emplace_back(Matrix::Constant(1, 1, k.anchor));
    return s;
}

int kramers_hitting_time(const KramersSpec& k, double epsilon, std::uint64_t seed, bool* censored) {
    const CausalGraph g = kramers_graph(k);
    FlowState s = kramers_initial_state(k, seed);
    FlowConfig fc;
    fc.eta = k.eta;
    fc.epsilon = epsilon;
    fc.seed = seed;
    fc.sinkhorn = SinkhornConfig{epsilon, 1000, 1e-10};
    const std::vector<bool> frozen{false, true, true};
    if (censored) *censored = false;
    if (center_of_mass(s.clouds[0])[0] >= k.threshold) return 0;
    for (int t = 1; t <= k.max_steps; ++t) {
        const auto sols = solve_edges(s, g, fc);
        std::vector<Matrix> drifts{node_drift(s, g, 0, sols), Matrix::Zero(1, 1), Matrix::Zero(1, 1)};
        s = langevin_step(s, drifts, fc, frozen);
        if (s.clouds[0].empty()) throw FlowAbort(t, "X", EnergyTrace{});
        if (center_of_mass(s.clouds[0])[0] >= k.threshold) return t;
    }
    if (censored) *censored = true;
    return k.max_steps;
}

std::vector<KramersCell> run_kramers(const KramersSpec& k, std::uint64_t seed, int threads) {
    std::vector<KramersCell> cells(k.epsilon.size());
    const std::size_t S = std::size_t(k.seeds);
    for (std::size_t i = 0; i < cells.size(); ++i) {
        cells[i].epsilon = k.epsilon[i];
        cells[i].tau.assign(S, 0);
        cells[i].censored.assign(S, false);
    }
    std::vector<char> cens(cells.size() * S, 0);
    // Run j uses the same stream at every epsilon (common random numbers).
    parallel_for(cells.size() * S, threads, [&](std::size_t idx) {
        const std::size_t i = idx / S, j = idx % S;
        bool c = false;
        cells[i].tau[j] = kramers_hitting_time(k, k.epsilon[i], derive_seed(seed, 0x6b72, j), &c);
        cens[idx] = c;
    });
    for (std::size_t i = 0; i < cells.size(); ++i) {
        KramersCell& c = cells[i];
        double sum = 0.0;
        for (std::size_t j = 0; j < S; ++j) {
            c.censored[j] = cens[i * S + j] != 0;
            c.censored_count += c.censored[j];
            sum += c.tau[j];
        }
        c.mean_tau = sum / double(S);
        double sq = 0.0;
        for (int t : c.tau) sq += (t - c.mean_tau) * (t - c.mean_tau);
        c.std_tau = S > 1 ? std::sqrt(sq / double(S - 1)) : 0.0;
        c.eps_log_tau = c.mean_tau > 0.0 ? c.epsilon * std::log(c.mean_tau) : 0.0;
        c.fully_censored = c.censored_count == int(S);
    }
    return cells;
}

Json kramers_json(const std::vector<KramersCell>& cells) {
    Json arr = Json::array();
    for (const auto& c : cells)
        arr.push_back(Json{{"epsilon", c.epsilon},
                           {"mean_tau", c.mean_tau},
                           {"std_tau", c.std_tau},
                           {"censored_count", c.censored_count},
                           {"fully_censored", c.fully_censored},
                           {"eps_log_tau", c.eps_log_tau},
                           {"tau", c.tau}});
    return Json{{"rows", arr}};
}

// ---- score ----------------------------------------------------------------

CandidateSet build_candidate_set(const ScoreSpec& spec, int particles, std::uint64_t seed) {
    CandidateSet cs;
    for (std::size_t i = 0; i < spec.data.size(); ++i) {
        const auto& [name, c] = spec.data[i];
        if (c.kind == CloudInit::Kind::File) {
            cs.data.emplace(name, load_cloud(c.path));
        } else {
            cs.data.emplace(name, sample_gaussian(c.mean, c.cov_diag, c.n > 0 ? c.n : particles, derive_seed(seed, i, 1)));
        }
    }
    for (const auto& c : spec.candidates) cs.candidates.push_back(Candidate{c.label, c.graph});
    return cs;
}

std::vector<ScoreRun> run_score(const ExperimentConfig& cfg) {
    std::vector<ScoreRun> runs;
    for (int s = 0; s < cfg.score.seeds; ++s) {
        ScoreRun r;
        r.seed = cfg.seed + std::uint64_t(s);
        const CandidateSet cs = build_candidate_set(cfg.score, cfg.particles, r.seed);
        FlowConfig fc = cfg.flow;
        fc.seed = r.seed;
        r.report = rank_candidates(cs, fc, cfg.score.tail);
        runs.push_back(std::move(r));
    }
    return runs;
}

Json score_json(const std::vector<ScoreRun>& runs) {
    Json arr = Json::array();
    for (const auto& r : runs) {
        Json ranking = Json::array();
        for (const auto& e : r.report.entries)
            ranking.push_back(Json{{"label", e.label},
                                   {"score", num(e.result.score)},
                                   {"tail_std", num(e.result.tail_std)},
                                   {"tail_rows", e.result.tail_rows},
                                   {"converged", e.result.converged},
                                   {"gap_ratio", num(e.gap_ratio)},
                                   {"failed", e.failed},
                                   {"error", e.error}});
        arr.push_back(Json{{"seed", r.seed}, {"ranking", ranking}});
    }
    return Json{{"runs", arr}};
}

}  // namespace esf
