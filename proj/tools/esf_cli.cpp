// esf: command-line driver for the entropic sheaf flow experiments.

#include "esf/config.hpp"
#include "esf/experiments.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace esf;

namespace {

struct Overrides {
    std::string config;
    std::vector<std::string> set;
    std::optional<int> steps;
    std::optional<double> eta;
    std::optional<double> epsilon;
    std::optional<long long> seed;
    std::optional<int> particles;
    std::optional<int> threads;
    std::string out;
    bool hodge = false;
};

void add_common_flags(CLI::App* sub, Overrides& o, const std::string& exp) {
    std::string steps_help = "Flow steps (flow.steps)";
    std::string eta_help = "Step size (flow.eta)";
    std::string eps_help = "Temperature / entropic epsilon (flow.epsilon)";
    std::string part_help = "Particles per Gaussian cloud (particles)";
    if (exp == "kramers") {
        steps_help = "Step cap per run (kramers.max_steps)";
        eta_help = "Step size (kramers.eta)";
        eps_help = "Single temperature instead of the list (kramers.epsilon)";
        part_help = "Particles on the dynamic node (kramers.n)";
    } else if (exp == "bench-ift") {
        steps_help = "Single unrolled horizon instead of the list (bench.L)";
        eta_help = "Unused by bench-ift";
        eps_help = "Single epsilon instead of the list (bench.epsilon)";
        part_help = "Single problem size instead of the list (bench.N)";
    }
    sub->add_option("-c,--config", o.config, "JSON config file merged over the built-in defaults");
    sub->add_option("--set", o.set, "Override a config key, e.g. --set flow.sinkhorn.tol=1e-8 (repeatable)");
    sub->add_option("--steps", o.steps, steps_help);
    sub->add_option("--eta", o.eta, eta_help);
    sub->add_option("--epsilon", o.epsilon, eps_help);
    sub->add_option("--seed", o.seed, "Master seed (seed)");
    sub->add_option("--particles", o.particles, part_help);
    sub->add_option("--threads", o.threads, "Worker cap; 1 is bit-reproducible (threads)");
    sub->add_option("--out", o.out, "Base output directory (default $ESF_OUT_DIR or ./runs)");
    sub->add_flag("--hodge", o.hodge, "Emit stationarity and eigenvalue probes in summary.json (hodge)");
}

Json resolve(const std::string& exp, const Overrides& o) {
    Json doc = default_config(exp);
    if (!o.config.empty()) {
        Json file = load_json_file(o.config);
        if (!file.is_object()) throw Error(ErrorCode::ConfigError, "<root>: config must be a JSON object");
        if (file.contains("experiment") && file["experiment"] != exp)
            throw Error(ErrorCode::ConfigError, "experiment: config is for '" + file["experiment"].dump() +
                                                    "' but the subcommand is '" + exp + "'");
        merge_json(doc, file);
    }
    for (const auto& s : o.set) apply_override(doc, s);
    if (exp == "kramers") {
        if (o.steps) set_path(doc, "kramers.max_steps", *o.steps);
        if (o.eta) set_path(doc, "kramers.eta", *o.eta);
        if (o.epsilon) set_path(doc, "kramers.epsilon", Json::array({*o.epsilon}));
        if (o.particles) set_path(doc, "kramers.n", *o.particles);
    } else if (exp == "bench-ift") {
        if (o.steps) set_path(doc, "bench.L", Json::array({*o.steps}));
        if (o.epsilon) set_path(doc, "bench.epsilon", Json::array({*o.epsilon}));
        if (o.particles) set_path(doc, "bench.N", Json::array({*o.particles}));
    } else {
        if (o.steps) set_path(doc, "flow.steps", *o.steps);
        if (o.eta) set_path(doc, "flow.eta", *o.eta);
        if (o.epsilon) set_path(doc, "flow.epsilon", *o.epsilon);
        if (o.particles) set_path(doc, "particles", *o.particles);
    }
    if (o.seed) set_path(doc, "seed", *o.seed);
    if (o.threads) set_path(doc, "threads", *o.threads);
    if (o.hodge) set_path(doc, "hodge", true);
    return doc;
}

std::string make_run_dir(const std::string& exp, const std::string& out_flag) {
    std::string base = out_flag;
    if (base.empty()) {
        const char* env = std::getenv("ESF_OUT_DIR");
        base = env && *env ? env : "runs";
    }
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    localtime_r(&now, &tm);
    std::ostringstream stamp;
    stamp << exp << '-' << std::put_time(&tm, "%Y%m%d-%H%M%S");
    fs::path dir = fs::path(base) / stamp.str();
    for (int k = 1; fs::exists(dir); ++k) dir = fs::path(base) / (stamp.str() + "-" + std::to_string(k));
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create '" + dir.string() + "': " + ec.message());
    return dir.string();
}

int execute(const ExperimentConfig& cfg, const std::string& dir) {
    const std::string& exp = cfg.experiment;
    if (exp == "run" || exp == "demo2d") {
        try {
            const RunOutcome out = run_flow_experiment(cfg);
            write_run_artifacts(out, dir);
            const RunSummary& s = out.summary;
            std::cout << std::setprecision(6) << "energy " << s.initial_energy << " -> " << s.final_energy << " ("
                      << s.reduction_pct << "% reduction) in " << s.wallclock_s << " s\n";
            for (std::size_t v = 0; v < s.node_names.size(); ++v)
                std::cout << "  " << s.node_names[v] << " com shift " << s.com_shift[v].transpose() << "\n";
            if (out.hodge)
                std::cout << "  stationarity " << out.hodge->stationarity_initial << " -> " << out.hodge->stationarity_final
                          << ", lambda_max " << out.hodge->lambda_max << ", lambda_min " << out.hodge->lambda_min << "\n";
        } catch (const FlowAbort& a) {
            write_trace_csv(a.partial_trace(), dir + "/trace.csv");
            throw;
        }
    } else if (exp == "bench-ift") {
        const auto rows = run_bench(cfg.bench, cfg.seed, cfg.threads);
        write_json(bench_json(rows), dir + "/bench.json");
        for (const auto& r : rows)
            std::cout << "N=" << r.n << " L=" << r.iterations << " eps=" << r.epsilon << " tape=" << r.tape_cells
                      << " ift_cells=" << r.ift_cells << " err_unrolled=" << r.grad_err_unrolled
                      << " err_ift=" << r.grad_err_ift << " err_env=" << r.grad_err_envelope << "\n";
    } else if (exp == "tear") {
        const auto seeds = run_tear(cfg);
        for (const auto& t : seeds) {
            write_trace_csv(t.cold.trace, dir + "/trace_cold_seed" + std::to_string(t.seed) + ".csv");
            write_trace_csv(t.warm.trace, dir + "/trace_warm_seed" + std::to_string(t.seed) + ".csv");
            std::cout << "seed " << t.seed << ": nn ratio " << t.final_nn_ratio << ", variance ratio " << t.variance_ratio
                      << (t.cold.aborted ? " (cold run aborted at step " + std::to_string(t.cold.abort_step) + ")" : "")
                      << "\n";
        }
        write_json(tear_json(seeds), dir + "/comparison.json");
    } else if (exp == "kramers") {
        const auto cells = run_kramers(cfg.kramers, cfg.seed, cfg.threads);
        write_json(kramers_json(cells), dir + "/kramers.json");
        for (const auto& c : cells)
            std::cout << "eps=" << c.epsilon << " mean_tau=" << c.mean_tau << " std=" << c.std_tau
                      << " censored=" << c.censored_count << " eps*log(tau)=" << c.eps_log_tau
                      << (c.fully_censored ? " FULLY CENSORED" : "") << "\n";
    } else if (exp == "score") {
        const auto runs = run_score(cfg);
        for (const auto& r : runs)
            for (const auto& e : r.report.entries) {
                if (!e.failed)
                    write_trace_csv(e.result.trace, dir + "/trace_" + e.label + "_seed" + std::to_string(r.seed) + ".csv");
                std::cout << "seed " << r.seed << " " << e.label << ": score " << e.result.score << " gap "
                          << e.gap_ratio << (e.failed ? " FAILED " + e.error : "") << "\n";
            }
        write_json(score_json(runs), dir + "/report.json");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Entropic sheaf flow experiments"};
    app.require_subcommand(1);
    std::map<std::string, Overrides> overrides;
    const std::map<std::string, std::string> descriptions{
        {"run", "Run the flow on a graph from --config"},
        {"demo2d", "Three-node 2D conflict demo"},
        {"score", "Rank candidate graphs by converged energy"},
        {"bench-ift", "Envelope / IFT / unrolled gradient benchmark"},
        {"tear", "Paired zero-noise vs noisy runs with tearing diagnostics"},
        {"kramers", "Double-well escape times across temperatures"}};
    for (const auto& name : experiment_names()) {
        CLI::App* sub = app.add_subcommand(name, descriptions.at(name));
        add_common_flags(sub, overrides[name], name);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    const std::string exp = app.get_subcommands().front()->get_name();
    const Overrides& o = overrides[exp];
    try {
        const ExperimentConfig cfg = parse_experiment_config(resolve(exp, o));
        const std::string dir = make_run_dir(exp, o.out);
        write_json(cfg.resolved, dir + "/config.resolved.json");
        std::cout << "run_dir: " << dir << "\n";
        return execute(cfg, dir);
    } catch (const Error& e) {
        std::cerr << "esf " << exp << ": " << e.what() << "\n";
        return e.code() == ErrorCode::ConfigError ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "esf " << exp << ": " << e.what() << "\n";
        return 1;
    }
}
