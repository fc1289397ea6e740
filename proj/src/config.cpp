#include "esf/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace esf {

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& msg) {
    throw Error(ErrorCode::ConfigError, (path.empty() ? std::string("<root>") : path) + ": " + msg);
}

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

// Reads one JSON object; every key must be consumed before finish().
class ObjectReader {
public:
    ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) fail(path_, "expected an object");
    }

    const std::string& path() const { return path_; }
    bool has(const std::string& key) const { return j_.contains(key); }

    const Json* child(const std::string& key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }
    const Json& require(const std::string& key) {
        const Json* c = child(key);
        if (!c) fail(join(path_, key), "required key missing");
        return *c;
    }

    double number(const std::string& key, double dflt) {
        const Json* c = child(key);
        return c ? as_number(*c, join(path_, key)) : dflt;
    }
    int integer(const std::string& key, int dflt) {
        const Json* c = child(key);
        return c ? as_int(*c, join(path_, key)) : dflt;
    }
    bool boolean(const std::string& key, bool dflt) {
        const Json* c = child(key);
        if (!c) return dflt;
        if (!c->is_boolean()) fail(join(path_, key), "expected a boolean");
        return c->get<bool>();
    }
    std::string string(const std::string& key, const std::string& dflt) {
        const Json* c = child(key);
        if (!c) return dflt;
        if (!c->is_string()) fail(join(path_, key), "expected a string");
        return c->get<std::string>();
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) fail(join(path_, it.key()), "unknown key");
    }

    static double as_number(const Json& j, const std::string& path) {
        if (!j.is_number()) fail(path, "expected a number");
        return j.get<double>();
    }
    static int as_int(const Json& j, const std::string& path) {
        if (!j.is_number_integer()) fail(path, "expected an integer");
        return j.get<int>();
    }

private:
    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

Vector as_vector(const Json& j, const std::string& path) {
    if (!j.is_array()) fail(path, "expected an array of numbers");
    Vector v(Eigen::Index(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v[Eigen::Index(i)] = ObjectReader::as_number(j[i], path + "[" + std::to_string(i) + "]");
    return v;
}

Matrix as_matrix(const Json& j, const std::string& path) {
    if (!j.is_array() || j.empty()) fail(path, "expected a non-empty array of rows");
    std::size_t cols = 0;
    for (std::size_t r = 0; r < j.size(); ++r) {
        const std::string rp = path + "[" + std::to_string(r) + "]";
        if (!j[r].is_array()) fail(rp, "expected a row array");
        if (r == 0) cols = j[r].size();
        if (j[r].size() != cols || cols == 0) fail(rp, "rows must be non-empty and of equal length");
    }
    Matrix M(Eigen::Index(j.size()), Eigen::Index(cols));
    for (std::size_t r = 0; r < j.size(); ++r)
        for (std::size_t c = 0; c < cols; ++c)
            M(Eigen::Index(r), Eigen::Index(c)) =
                ObjectReader::as_number(j[r][c], path + "[" + std::to_string(r) + "][" + std::to_string(c) + "]");
    return M;
}

template <class T, class F>
std::vector<T> as_list(const Json& j, const std::string& path, F&& item) {
    if (!j.is_array()) fail(path, "expected an array");
    std::vector<T> out;
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(item(j[i], path + "[" + std::to_string(i) + "]"));
    return out;
}

CloudInit parse_cloud_init(const Json& j, const std::string& path) {
    ObjectReader r(j, path);
    CloudInit c;
    const std::string type = r.string("type", "gaussian");
    if (type == "gaussian") {
        c.kind = CloudInit::Kind::Gaussian;
        c.mean = as_vector(r.require("mean"), join(path, "mean"));
        if (const Json* cv = r.child("cov_diag")) {
            c.cov_diag = as_vector(*cv, join(path, "cov_diag"));
            if (c.cov_diag.size() != c.mean.size()) fail(join(path, "cov_diag"), "length differs from mean");
            if ((c.cov_diag.array() < 0.0).any()) fail(join(path, "cov_diag"), "entries must be nonnegative");
        } else {
            c.cov_diag = Vector::Ones(c.mean.size());
        }
        c.n = r.integer("n", 0);
        if (c.n < 0) fail(join(path, "n"), "must be nonnegative");
    } else if (type == "file") {
        c.kind = CloudInit::Kind::File;
        c.path = r.string("path", "");
        if (c.path.empty()) fail(join(path, "path"), "required for file clouds");
    } else {
        fail(join(path, "type"), "expected 'gaussian' or 'file', got '" + type + "'");
    }
    r.finish();
    return c;
}

std::vector<std::pair<std::string, CloudInit>> parse_cloud_map(const Json& j, const std::string& path) {
    if (!j.is_object()) fail(path, "expected an object keyed by node name");
    std::vector<std::pair<std::string, CloudInit>> out;
    for (auto it = j.begin(); it != j.end(); ++it) out.emplace_back(it.key(), parse_cloud_init(it.value(), join(path, it.key())));
    return out;
}

void check_cloud_map(const CausalGraph& g, const std::vector<std::pair<std::string, CloudInit>>& m,
                     const std::string& path) {
    for (const auto& [name, c] : m) {
        const int i = g.node_index(name);
        if (i < 0) fail(join(path, name), "no such node in the graph");
        if (c.kind == CloudInit::Kind::Gaussian && c.mean.size() != g.nodes[std::size_t(i)].dim)
            fail(join(path, name) + ".mean", "length differs from the node dimension");
    }
    for (const auto& n : g.nodes) {
        bool found = false;
        for (const auto& kv : m) found = found || kv.first == n.name;
        if (!found) fail(join(path, n.name), "missing initial cloud for node");
    }
}

FlowConfig parse_flow(const Json& j, const std::string& path) {
    ObjectReader r(j, path);
    FlowConfig f;
    f.eta = r.number("eta", f.eta);
    if (!(f.eta > 0.0)) fail(join(path, "eta"), "must be positive");
    f.epsilon = r.number("epsilon", f.epsilon);
    if (!(f.epsilon >= 0.0)) fail(join(path, "epsilon"), "must be nonnegative");
    f.steps = r.integer("steps", f.steps);
    if (f.steps < 0) fail(join(path, "steps"), "must be nonnegative");
    const std::string nc = r.string("noise_convention", "alg1");
    if (nc == "alg1") f.noise_convention = NoiseConvention::Alg1;
    else if (nc == "sde") f.noise_convention = NoiseConvention::SDE;
    else fail(join(path, "noise_convention"), "expected 'alg1' or 'sde'");
    f.snapshot_every = r.integer("snapshot_every", f.snapshot_every);
    if (f.snapshot_every < 1) fail(join(path, "snapshot_every"), "must be at least 1");
    if (const Json* s = r.child("sinkhorn")) {
        const std::string sp = join(path, "sinkhorn");
        ObjectReader sr(*s, sp);
        f.sinkhorn.max_iters = sr.integer("max_iters", f.sinkhorn.max_iters);
        if (f.sinkhorn.max_iters < 1) fail(join(sp, "max_iters"), "must be at least 1");
        f.sinkhorn.newton_after = sr.integer("newton_after", f.sinkhorn.newton_after);
        f.sinkhorn.tol = sr.number("tol", f.sinkhorn.tol);
        if (!(f.sinkhorn.tol > 0.0)) fail(join(sp, "tol"), "must be positive");
        sr.finish();
    }
    if (const Json* c = r.child("drift_clip"); c && !c->is_null()) {
        const double v = ObjectReader::as_number(*c, join(path, "drift_clip"));
        if (!(v > 0.0)) fail(join(path, "drift_clip"), "must be positive or null");
        f.drift_clip = v;
    }
    f.zero_noise_solver_epsilon = r.number("zero_noise_solver_epsilon", f.zero_noise_solver_epsilon);
    if (!(f.zero_noise_solver_epsilon > 0.0)) fail(join(path, "zero_noise_solver_epsilon"), "must be positive");
    f.noise_scale = r.number("noise_scale", f.noise_scale);
    if (!(f.noise_scale >= 0.0)) fail(join(path, "noise_scale"), "must be nonnegative");
    f.half_energy = r.boolean("half_energy", f.half_energy);
    f.warm_start = r.boolean("warm_start", f.warm_start);
    if (const Json* fr = r.child("frozen_nodes"))
        f.frozen_nodes = as_list<std::string>(*fr, join(path, "frozen_nodes"), [](const Json& x, const std::string& p) {
            if (!x.is_string()) fail(p, "expected a node name");
            return x.get<std::string>();
        });
    r.finish();
    return f;
}

std::vector<double> number_list(const Json& j, const std::string& path) {
    return as_list<double>(j, path, [](const Json& x, const std::string& p) { return ObjectReader::as_number(x, p); });
}

std::vector<int> int_list(const Json& j, const std::string& path) {
    return as_list<int>(j, path, [](const Json& x, const std::string& p) { return ObjectReader::as_int(x, p); });
}

BenchSpec parse_bench(const Json& j, const std::string& path) {
    ObjectReader r(j, path);
    BenchSpec b;
    if (const Json* c = r.child("N")) b.n = int_list(*c, join(path, "N"));
    if (const Json* c = r.child("L")) b.iterations = int_list(*c, join(path, "L"));
    if (const Json* c = r.child("epsilon")) b.epsilon = number_list(*c, join(path, "epsilon"));
    b.loose_tol = r.number("loose_tol", b.loose_tol);
    b.dim = r.integer("dim", b.dim);
    r.finish();
    for (std::size_t i = 0; i < b.n.size(); ++i)
        if (b.n[i] < 1) fail(join(path, "N") + "[" + std::to_string(i) + "]", "must be positive");
    for (std::size_t i = 0; i < b.iterations.size(); ++i)
        if (b.iterations[i] < 1) fail(join(path, "L") + "[" + std::to_string(i) + "]", "must be positive");
    for (std::size_t i = 0; i < b.epsilon.size(); ++i)
        if (!(b.epsilon[i] > 0.0)) fail(join(path, "epsilon") + "[" + std::to_string(i) + "]", "must be positive");
    if (!(b.loose_tol > 0.0)) fail(join(path, "loose_tol"), "must be positive");
    if (b.dim < 1) fail(join(path, "dim"), "must be positive");
    return b;
}

KramersSpec parse_kramers(const Json& j, const std::string& path) {
    ObjectReader r(j, path);
    KramersSpec k;
    if (const Json* c = r.child("epsilon")) k.epsilon = number_list(*c, join(path, "epsilon"));
    k.seeds = r.integer("seeds", k.seeds);
    k.threshold = r.number("threshold", k.threshold);
    k.max_steps = r.integer("max_steps", k.max_steps);
    k.n = r.integer("n", k.n);
    k.eta = r.number("eta", k.eta);
    k.start_mean = r.number("start_mean", k.start_mean);
    k.start_std = r.number("start_std", k.start_std);
    k.anchor = r.number("anchor", k.anchor);
    k.width = r.number("width", k.width);
    k.bias = r.number("bias", k.bias);
    k.offset = r.number("offset", k.offset);
    k.scale = r.number("scale", k.scale);
    r.finish();
    if (k.epsilon.empty()) fail(join(path, "epsilon"), "must list at least one temperature");
    for (std::size_t i = 0; i < k.epsilon.size(); ++i)
        if (!(k.epsilon[i] > 0.0)) fail(join(path, "epsilon") + "[" + std::to_string(i) + "]", "must be positive");
    if (k.seeds < 1) fail(join(path, "seeds"), "must be positive");
    if (k.max_steps < 1) fail(join(path, "max_steps"), "must be positive");
    if (k.n < 1) fail(join(path, "n"), "must be positive");
    if (!(k.eta > 0.0)) fail(join(path, "eta"), "must be positive");
    if (!(k.start_std >= 0.0)) fail(join(path, "start_std"), "must be nonnegative");
    if (!(k.width > 0.0)) fail(join(path, "width"), "must be positive");
    if (!(k.scale >= 0.0 && k.scale < 1.0)) fail(join(path, "scale"), "must lie in [0, 1)");
    return k;
}

TearSpec parse_tear(const Json& j, const std::string& path) {
    ObjectReader r(j, path);
    TearSpec t;
    if (const Json* c = r.child("epsilon")) {
        const auto v = number_list(*c, join(path, "epsilon"));
        if (v.size() != 2) fail(join(path, "epsilon"), "expected [cold, warm]");
        t.cold_epsilon = v[0];
        t.warm_epsilon = v[1];
    }
    t.seeds = r.integer("seeds", t.seeds);
    r.finish();
    if (!(t.cold_epsilon >= 0.0) || !(t.warm_epsilon >= 0.0)) fail(join(path, "epsilon"), "must be nonnegative");
    if (t.seeds < 1) fail(join(path, "seeds"), "must be positive");
    return t;
}

ScoreSpec parse_score(const Json& j, const std::string& path) {
    ObjectReader r(j, path);
    ScoreSpec s;
    s.candidates = as_list<ScoreCandidateSpec>(r.require("candidates"), join(path, "candidates"),
                                                [](const Json& x, const std::string& p) {
                                                    ObjectReader cr(x, p);
                                                    ScoreCandidateSpec c;
                                                    c.label = cr.string("label", "");
                                                    if (c.label.empty()) fail(join(p, "label"), "required");
                                                    c.graph = parse_graph(cr.require("graph"), join(p, "graph"));
                                                    cr.finish();
                                                    return c;
                                                });
    if (s.candidates.empty()) fail(join(path, "candidates"), "at least one candidate required");
    s.data = parse_cloud_map(r.require("data"), join(path, "data"));
    s.tail = r.integer("tail", s.tail);
    if (s.tail < 1) fail(join(path, "tail"), "must be positive");
    s.seeds = r.integer("seeds", s.seeds);
    if (s.seeds < 1) fail(join(path, "seeds"), "must be positive");
    r.finish();
    for (std::size_t i = 0; i < s.candidates.size(); ++i) {
        const auto& g = s.candidates[i].graph;
        for (const auto& n : g.nodes) {
            bool found = false;
            for (const auto& [name, c] : s.data) {
                if (name != n.name) continue;
                found = true;
                if (c.kind == CloudInit::Kind::Gaussian && c.mean.size() != n.dim)
                    fail(join(path, "data." + name) + ".mean", "length differs from node dimension in candidate '" +
                                                                  s.candidates[i].label + "'");
            }
            if (!found) fail(join(path, "data"), "no data for node '" + n.name + "' of candidate '" + s.candidates[i].label + "'");
        }
    }
    return s;
}

}  // namespace

Mechanism parse_mechanism(const Json& j, const std::string& path) {
    ObjectReader r(j, path);
    const std::string type = r.string("type", "");
    Mechanism m;
    try {
        if (type == "shift") {
            m = make_shift(as_vector(r.require("b"), join(path, "b")));
        } else if (type == "affine") {
            Matrix A = as_matrix(r.require("A"), join(path, "A"));
            Vector b = r.has("b") ? as_vector(r.require("b"), join(path, "b")) : Vector(Vector::Zero(A.rows()));
            m = make_affine(std::move(A), std::move(b));
        } else if (type == "smooth_residual") {
            Matrix W1 = as_matrix(r.require("W1"), join(path, "W1"));
            Matrix W2 = as_matrix(r.require("W2"), join(path, "W2"));
            Vector b1 = r.has("b1") ? as_vector(r.require("b1"), join(path, "b1")) : Vector(Vector::Zero(W1.rows()));
            const double scale = r.number("scale", 0.9);
            m = make_smooth_residual(std::move(W1), std::move(W2), std::move(b1), scale);
        } else if (type == "composite") {
            m = make_composite(as_list<Mechanism>(r.require("stages"), join(path, "stages"), parse_mechanism));
        } else {
            fail(join(path, "type"), "expected shift, affine, smooth_residual or composite");
        }
    } catch (const Error& e) {
        if (e.code() == ErrorCode::ConfigError) throw;
        fail(path, e.what());
    }
    r.finish();
    return m;
}

CausalGraph parse_graph(const Json& j, const std::string& path) {
    ObjectReader r(j, path);
    CausalGraph g;
    g.nodes = as_list<NodeSpec>(r.require("nodes"), join(path, "nodes"), [](const Json& x, const std::string& p) {
        ObjectReader nr(x, p);
        NodeSpec n;
        n.name = nr.string("name", "");
        if (n.name.empty()) fail(join(p, "name"), "required");
        n.dim = nr.integer("dim", 1);
        nr.finish();
        return n;
    });
    if (const Json* e = r.child("edges"))
        g.edges = as_list<EdgeSpec>(*e, join(path, "edges"), [](const Json& x, const std::string& p) {
            ObjectReader er(x, p);
            EdgeSpec s;
            s.src = er.string("src", "");
            s.dst = er.string("dst", "");
            if (s.src.empty()) fail(join(p, "src"), "required");
            if (s.dst.empty()) fail(join(p, "dst"), "required");
            s.weight = er.number("weight", 1.0);
            s.mechanism = parse_mechanism(er.require("mechanism"), join(p, "mechanism"));
            er.finish();
            return s;
        });
    r.finish();
    for (std::size_t k = 0; k < g.edges.size(); ++k) {
        const EdgeSpec& e = g.edges[k];
        const int s = g.node_index(e.src), d = g.node_index(e.dst);
        if (s < 0 || d < 0) continue;  // reported by validate_graph
        if (e.mechanism.in_dim() != g.nodes[std::size_t(s)].dim || e.mechanism.out_dim() != g.nodes[std::size_t(d)].dim)
            fail(join(path, "edges") + "[" + std::to_string(k) + "].mechanism",
                 "maps " + std::to_string(e.mechanism.in_dim()) + " -> " + std::to_string(e.mechanism.out_dim()) +
                     " but the nodes have dims " + std::to_string(g.nodes[std::size_t(s)].dim) + " -> " +
                     std::to_string(g.nodes[std::size_t(d)].dim));
    }
    try {
        validate_graph(g);
    } catch (const Error& e) {
        fail(path, e.what());
    }
    return g;
}

const std::vector<std::string>& experiment_names() {
    static const std::vector<std::string> names{"run", "demo2d", "score", "bench-ift", "tear", "kramers"};
    return names;
}

namespace {

const char* kDemoGraph = R"({
  "nodes": [{"name": "A", "dim": 2}, {"name": "B", "dim": 2}, {"name": "C", "dim": 2}],
  "edges": [
    {"src": "A", "dst": "B", "weight": 1.0, "mechanism": {"type": "shift", "b": [4, 4]}},
    {"src": "B", "dst": "C", "weight": 1.0, "mechanism": {"type": "shift", "b": [4, -4]}},
    {"src": "A", "dst": "C", "weight": 1.0, "mechanism": {"type": "shift", "b": [0, 8]}}
  ]
})";

const char* kDemoInit = R"({
  "A": {"type": "gaussian", "mean": [0, 0], "cov_diag": [1, 1]},
  "B": {"type": "gaussian", "mean": [0, 0], "cov_diag": [1, 1]},
  "C": {"type": "gaussian", "mean": [8, 0], "cov_diag": [1, 1]}
})";

const char* kScoreBlock = R"({
  "candidates": [
    {"label": "true", "graph": {
      "nodes": [{"name": "A", "dim": 2}, {"name": "B", "dim": 2}, {"name": "C", "dim": 2}],
      "edges": [
        {"src": "A", "dst": "B", "mechanism": {"type": "shift", "b": [4, 4]}},
        {"src": "B", "dst": "C", "mechanism": {"type": "shift", "b": [4, -4]}}
      ]}},
    {"label": "spurious", "graph": {
      "nodes": [{"name": "A", "dim": 2}, {"name": "B", "dim": 2}, {"name": "C", "dim": 2}],
      "edges": [
        {"src": "A", "dst": "B", "mechanism": {"type": "shift", "b": [4, 4]}},
        {"src": "B", "dst": "C", "mechanism": {"type": "shift", "b": [4, -4]}},
        {"src": "A", "dst": "C", "mechanism": {"type": "shift", "b": [0, 8]}}
      ]}}
  ],
  "data": {
    "A": {"type": "gaussian", "mean": [0, 0], "cov_diag": [1, 1]},
    "B": {"type": "gaussian", "mean": [4, 4], "cov_diag": [1, 1]},
    "C": {"type": "gaussian", "mean": [8, 0], "cov_diag": [1, 1]}
  },
  "tail": 20,
  "seeds": 1
})";

Json flow_defaults(double eta, double epsilon, int steps) {
    const FlowConfig f;
    return Json{{"eta", eta},
                {"epsilon", epsilon},
                {"steps", steps},
                {"noise_convention", "alg1"},
                {"snapshot_every", f.snapshot_every},
                {"sinkhorn",
                 {{"max_iters", f.sinkhorn.max_iters}, {"tol", f.sinkhorn.tol}, {"newton_after", f.sinkhorn.newton_after}}},
                {"drift_clip", nullptr},
                {"zero_noise_solver_epsilon", f.zero_noise_solver_epsilon},
                {"noise_scale", f.noise_scale},
                {"half_energy", f.half_energy},
                {"warm_start", f.warm_start},
                {"frozen_nodes", Json::array()}};
}

}  // namespace

Json default_config(const std::string& experiment) {
    Json d{{"experiment", experiment}, {"seed", 0}, {"particles", 300}, {"threads", 1}, {"hodge", false}, {"hodge_quench", 50}};
    if (experiment == "run") {
        d["graph"] = Json{{"nodes", Json::array()}, {"edges", Json::array()}};
        d["init"] = Json::object();
        d["flow"] = flow_defaults(0.01, 0.1, 500);
    } else if (experiment == "demo2d" || experiment == "tear") {
        d["graph"] = Json::parse(kDemoGraph);
        d["init"] = Json::parse(kDemoInit);
        d["flow"] = flow_defaults(0.01, 0.1, 500);
        if (experiment == "tear") d["tear"] = Json{{"epsilon", {0.0, 0.1}}, {"seeds", 5}};
    } else if (experiment == "score") {
        d["particles"] = 200;
        d["flow"] = flow_defaults(0.01, 0.2, 300);
        d["score"] = Json::parse(kScoreBlock);
    } else if (experiment == "bench-ift") {
        const BenchSpec b;
        d["bench"] = Json{{"N", b.n}, {"L", b.iterations}, {"epsilon", b.epsilon}, {"loose_tol", b.loose_tol}, {"dim", b.dim}};
    } else if (experiment == "kramers") {
        const KramersSpec k;
        d["particles"] = k.n;
        d["kramers"] = Json{{"epsilon", k.epsilon},     {"seeds", k.seeds},       {"threshold", k.threshold},
                            {"max_steps", k.max_steps}, {"n", k.n},               {"eta", k.eta},
                            {"start_mean", k.start_mean}, {"start_std", k.start_std}, {"anchor", k.anchor},
                            {"width", k.width},         {"bias", k.bias},         {"offset", k.offset},
                            {"scale", k.scale}};
    } else {
        fail("experiment", "unknown experiment '" + experiment + "'");
    }
    return d;
}

void merge_json(Json& base, const Json& patch) {
    if (!base.is_object() || !patch.is_object()) {
        base = patch;
        return;
    }
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        if (base.contains(it.key()) && base[it.key()].is_object() && it.value().is_object())
            merge_json(base[it.key()], it.value());
        else
            base[it.key()] = it.value();
    }
}

void set_path(Json& doc, const std::string& dotted, Json value) {
    if (dotted.empty()) fail("", "empty override key");
    Json* cur = &doc;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = dotted.find('.', start);
        const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) fail(dotted, "malformed override key");
        if (!cur->is_object()) fail(dotted.substr(0, start ? start - 1 : 0), "cannot descend into a non-object");
        if (dot == std::string::npos) {
            (*cur)[key] = std::move(value);
            return;
        }
        cur = &(*cur)[key];
        if (cur->is_null()) *cur = Json::object();
        start = dot + 1;
    }
}

void apply_override(Json& doc, const std::string& assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string::npos) fail(assignment, "override must look like key.path=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    Json value = Json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    set_path(doc, key, std::move(value));
}

ExperimentConfig parse_experiment_config(const Json& doc) {
    ObjectReader r(doc, "");
    ExperimentConfig c;
    c.resolved = doc;
    c.experiment = r.string("experiment", "");
    bool known = false;
    for (const auto& n : experiment_names()) known = known || n == c.experiment;
    if (!known) fail("experiment", "unknown experiment '" + c.experiment + "'");

    if (const Json* s = r.child("seed")) {
        if (!s->is_number_integer() || s->get<long long>() < 0) fail("seed", "expected a nonnegative integer");
        c.seed = s->get<std::uint64_t>();
    }
    c.particles = r.integer("particles", c.particles);
    if (c.particles < 1) fail("particles", "must be positive");
    c.threads = r.integer("threads", c.threads);
    if (c.threads < 1) fail("threads", "must be positive");
    c.hodge = r.boolean("hodge", c.hodge);
    c.hodge_quench = r.integer("hodge_quench", c.hodge_quench);
    if (c.hodge_quench < 0) fail("hodge_quench", "must be nonnegative");

    if (const Json* g = r.child("graph")) c.graph = parse_graph(*g, "graph");
    if (const Json* i = r.child("init")) {
        c.init = parse_cloud_map(*i, "init");
        check_cloud_map(c.graph, c.init, "init");
    } else if (!c.graph.nodes.empty()) {
        fail("init", "required when the graph has nodes");
    }
    if (const Json* f = r.child("flow")) c.flow = parse_flow(*f, "flow");
    c.flow.seed = c.seed;
    c.flow.threads = c.threads;
    for (const auto& n : c.flow.frozen_nodes)
        if (c.graph.node_index(n) < 0 && c.experiment != "kramers") fail("flow.frozen_nodes", "unknown node '" + n + "'");

    if (const Json* b = r.child("bench")) c.bench = parse_bench(*b, "bench");
    if (const Json* k = r.child("kramers")) c.kramers = parse_kramers(*k, "kramers");
    if (const Json* t = r.child("tear")) c.tear = parse_tear(*t, "tear");
    if (const Json* s = r.child("score")) c.score = parse_score(*s, "score");
    else if (c.experiment == "score") fail("score", "required for the score experiment");
    r.finish();

    if (c.experiment == "run" && c.graph.nodes.empty()) fail("graph", "run needs a graph with at least one node");
    return c;
}

Json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::ConfigError, path + ": cannot open config file");
    std::stringstream ss;
    ss << in.rdbuf();
    Json j = Json::parse(ss.str(), nullptr, false, true);
    if (j.is_discarded()) throw Error(ErrorCode::ConfigError, path + ": not valid JSON");
    return j;
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
    // Disjoint from the per-step noise streams by the high tag bit.
    return noise_stream_seed(master, a | (1ULL << 62), b);
}

FlowState build_initial_state(const CausalGraph& g, const std::vector<std::pair<std::string, CloudInit>>& specs,
                              int particles, std::uint64_t seed) {
    FlowState s;
    for (const auto& n : g.nodes) {
        std::size_t pos = specs.size();
        for (std::size_t i = 0; i < specs.size(); ++i)
            if (specs[i].first == n.name) pos = i;
        if (pos == specs.size()) throw Error(ErrorCode::ConfigError, "init." + n.name + ": missing initial cloud");
        const CloudInit& c = specs[pos].second;
        if (c.kind == CloudInit::Kind::File) {
            ParticleCloud cloud = load_cloud(c.path);
            if (cloud.dim() != n.dim)
                throw Error(ErrorCode::ConfigError, "init." + n.name + ".path: cloud dimension differs from node");
            s.clouds.push_back(std::move(cloud));
        } else {
            const int count = c.n > 0 ? c.n : particles;
            s.clouds.push_back(sample_gaussian(c.mean, c.cov_diag, count, derive_seed(seed, pos, 0)));
        }
    }
    return s;
}

}  // namespace esf
