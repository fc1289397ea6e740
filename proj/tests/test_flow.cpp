#include "esf/flow.hpp"
#include "oracles.hpp"

#include <doctest.h>

using namespace esf;

namespace {

CausalGraph demo_graph() {
    CausalGraph g;
    g.nodes = {{"A", 2}, {"B", 2}, {"C", 2}};
    g.edges.push_back({"A", "B", make_shift(Eigen::Vector2d(4, 4)), 1.0});
    g.edges.push_back({"B", "C", make_shift(Eigen::Vector2d(4, -4)), 1.0});
    g.edges.push_back({"A", "C", make_shift(Eigen::Vector2d(0, 8)), 1.0});
    return g;
}

FlowState demo_state(int n, std::uint64_t seed) {
    FlowState s;
    s.clouds.push_back(sample_gaussian(Vector::Zero(2), Vector::Ones(2), n, seed));
    s.clouds.push_back(sample_gaussian(Vector::Zero(2), Vector::Ones(2), n, seed + 1));
    s.clouds.push_back(sample_gaussian(Eigen::Vector2d(8, 0), Vector::Ones(2), n, seed + 2));
    return s;
}

FlowConfig tight_cfg(double eps) {
    FlowConfig cfg;
    cfg.epsilon = eps;
    cfg.sinkhorn = SinkhornConfig{eps, 200000, 1e-12};
    return cfg;
}

}  // namespace

TEST_CASE("energy of trivial and coherent configurations") {
    CausalGraph empty;
    empty.nodes = {{"A", 2}};
    FlowState one;
    one.clouds.push_back(sample_gaussian(Vector::Zero(2), Vector::Ones(2), 20, 1));
    CHECK(dirichlet_energy(one, empty, FlowConfig{}).total == 0.0);

    CausalGraph g;
    g.nodes = {{"U", 2}, {"V", 2}};
    g.edges.push_back({"U", "V", make_shift(Eigen::Vector2d(3, -1)), 1.0});
    FlowState s;
    s.clouds.push_back(sample_gaussian(Vector::Zero(2), Vector::Ones(2), 40, 2));
    s.clouds.push_back(pushforward(s.clouds[0], g.edges[0].mechanism));
    const double e = dirichlet_energy(s, g, tight_cfg(0.01)).total;
    CHECK(e >= -1e-12);
    CHECK(e <= 0.01 * std::log(40.0) + 1e-9);
}

TEST_CASE("demo2d initial energy against the translation formula and exact transport") {
    const CausalGraph g = demo_graph();
    const FlowState s = demo_state(300, 100);
    FlowConfig cfg;
    cfg.sinkhorn = SinkhornConfig{0.1, 100000, 1e-9};
    const EnergyReport rep = dirichlet_energy(s, g, cfg);
    const double analytic[3] = {32.0, 32.0, 128.0};
    for (int e = 0; e < 3; ++e) CHECK(std::abs(rep.per_edge[std::size_t(e)] - analytic[e]) <= 0.1 * analytic[e]);
    CHECK(std::abs(rep.total - 192.0) <= 0.1 * 192.0);

    // 64-point exact assignment per edge
    double exact_total = 0.0;
    for (const auto& e : g.edges) {
        const Matrix X = pushforward(s.clouds[std::size_t(g.node_index(e.src))], e.mechanism).points().topRows(64);
        const Matrix Y = s.clouds[std::size_t(g.node_index(e.dst))].points().topRows(64);
        exact_total += oracle::exact_w2_uniform(X, Y);
    }
    CHECK(std::abs(exact_total - 192.0) <= 0.1 * 192.0);

    FlowConfig half = cfg;
    half.half_energy = true;
    CHECK(dirichlet_energy(s, g, half).total == doctest::Approx(0.5 * rep.total));

    CausalGraph weighted = g;
    weighted.edges[2].weight = 2.5;
    CHECK(dirichlet_energy(s, weighted, cfg).total ==
          doctest::Approx(rep.per_edge[0] + rep.per_edge[1] + 2.5 * rep.per_edge[2]).epsilon(1e-9));
}

TEST_CASE("drift: isolated node, equilibrium, and demo2d mean field") {
    CausalGraph g = demo_graph();
    g.nodes.push_back({"D", 2});
    FlowState s = demo_state(300, 200);
    s.clouds.push_back(sample_gaussian(Vector::Zero(2), Vector::Ones(2), 30, 9));
    FlowConfig cfg;
    cfg.sinkhorn = SinkhornConfig{0.1, 100000, 1e-9};
    CHECK(node_drift(s, g, 3, cfg).cwiseAbs().maxCoeff() == 0.0);

    const Matrix vc = node_drift(s, g, 2, cfg);
    const Eigen::RowVector2d mean = vc.colwise().mean();
    const Eigen::RowVector2d ref(24, -8);
    CHECK(mean[0] > 0.0);
    CHECK(mean[1] < 0.0);
    CHECK((mean - ref).norm() <= 0.3 * ref.norm());

    CausalGraph pair;
    pair.nodes = {{"U", 2}, {"V", 2}};
    pair.edges.push_back({"U", "V", make_shift(Eigen::Vector2d(1, 2)), 1.0});
    FlowState eq;
    // separated atoms: the plan is a permutation and the pair is at equilibrium
    Matrix grid(49, 2);
    for (int i = 0; i < 49; ++i) grid.row(i) << i % 7, i / 7;
    eq.clouds.push_back(ParticleCloud(grid));
    eq.clouds.push_back(pushforward(eq.clouds[0], pair.edges[0].mechanism));
    const FlowConfig small = tight_cfg(0.005);
    CHECK(node_drift(eq, pair, 0, small).rowwise().norm().maxCoeff() < 1e-8);
    CHECK(node_drift(eq, pair, 1, small).rowwise().norm().maxCoeff() < 1e-8);
}

TEST_CASE("drift is the gradient of the energy") {
    std::mt19937_64 rng(50);
    CausalGraph g;
    g.nodes = {{"A", 2}, {"B", 2}, {"C", 2}};
    g.edges.push_back({"A", "B",
                       make_smooth_residual(oracle::gaussian_matrix(3, 2, rng), oracle::gaussian_matrix(2, 3, rng),
                                            oracle::gaussian_vector(3, rng), 0.8),
                       1.0});
    g.edges.push_back({"B", "C", make_affine(Matrix::Identity(2, 2) + 0.3 * oracle::gaussian_matrix(2, 2, rng),
                                             Eigen::Vector2d(1, 0)),
                       0.7});
    g.edges.push_back({"A", "C", make_shift(Eigen::Vector2d(0.5, 1.5)), 1.3});
    FlowState s;
    s.clouds.push_back(oracle::random_cloud(12, 2, rng, 0.0, false));
    s.clouds.push_back(oracle::random_cloud(10, 2, rng, 0.5, false));
    s.clouds.push_back(oracle::random_cloud(14, 2, rng, 1.0, false));
    const FlowConfig cfg = tight_cfg(0.4);

    for (int v = 0; v < 3; ++v) {
        const Matrix drift = node_drift(s, g, v, cfg);
        const ParticleCloud base = s.clouds[std::size_t(v)];
        const Matrix fd = oracle::fd_gradient(
            [&](const Matrix& X) {
                FlowState t = s;
                t.clouds[std::size_t(v)] = ParticleCloud(X, base.weights());
                return dirichlet_energy(t, g, cfg).total;
            },
            base.points(), 1e-5);
        CHECK(oracle::rel_err(base.weights().asDiagonal() * drift, fd) <= 1e-3);
    }
}

TEST_CASE("translation equivariance") {
    const CausalGraph g = demo_graph();
    const FlowState s = demo_state(60, 300);
    FlowState t = s;
    const Eigen::RowVector2d v(-3.0, 7.5);
    for (auto& c : t.clouds) c = ParticleCloud(Matrix(c.points().rowwise() + v), c.weights());
    const FlowConfig cfg = tight_cfg(0.2);
    const EnergyReport a = dirichlet_energy(s, g, cfg), b = dirichlet_energy(t, g, cfg);
    for (std::size_t e = 0; e < 3; ++e) CHECK(a.per_edge[e] == doctest::Approx(b.per_edge[e]).epsilon(1e-9));
    for (int n = 0; n < 3; ++n) CHECK((node_drift(s, g, n, cfg) - node_drift(t, g, n, cfg)).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("langevin step") {
    FlowState s;
    s.clouds.push_back(ParticleCloud(Matrix::Zero(3, 2)));
    FlowConfig cfg;
    cfg.epsilon = 0.0;
    cfg.eta = 0.01;
    Matrix V = Matrix::Zero(3, 2);
    V.col(0).setOnes();
    const FlowState next = langevin_step(s, {V}, cfg);
    CHECK((next.clouds[0].points().col(0).array() + 0.01).abs().maxCoeff() < 1e-15);
    CHECK(next.clouds[0].points().col(1).cwiseAbs().maxCoeff() == 0.0);
    CHECK(next.step == 1);

    const int n = 100000;
    FlowState big;
    big.clouds.push_back(ParticleCloud(Matrix::Zero(n, 1)));
    cfg.epsilon = 0.1;
    const Matrix Z = Matrix::Zero(n, 1);
    const auto sd = [&](const FlowState& st) {
        const Vector x = st.clouds[0].points().col(0);
        return std::sqrt((x.array() - x.mean()).square().sum() / double(n - 1));
    };
    const double alg1 = sd(langevin_step(big, {Z}, cfg));
    CHECK(std::abs(alg1 - std::sqrt(0.002)) <= 0.02 * std::sqrt(0.002));
    cfg.noise_convention = NoiseConvention::SDE;
    const double sde = sd(langevin_step(big, {Z}, cfg));
    CHECK(std::abs(sde - std::sqrt(0.001)) <= 0.02 * std::sqrt(0.001));

    cfg.noise_convention = NoiseConvention::Alg1;
    const FlowState r1 = langevin_step(big, {Z}, cfg), r2 = langevin_step(big, {Z}, cfg);
    CHECK(r1.clouds[0].points() == r2.clouds[0].points());
    cfg.seed = 1;
    CHECK(langevin_step(big, {Z}, cfg).clouds[0].points() != r1.clouds[0].points());

    cfg.noise_scale = 0.0;
    CHECK(langevin_step(big, {Z}, cfg).clouds[0].points().cwiseAbs().maxCoeff() == 0.0);

    FlowConfig clip;
    clip.epsilon = 0.0;
    clip.eta = 1.0;
    clip.drift_clip = 0.5;
    Matrix W(3, 2);
    W << 3, 4, 0.1, 0, 0, -2;
    const Matrix moved = langevin_step(s, {W}, clip).clouds[0].points();
    CHECK(moved.row(0).norm() == doctest::Approx(0.5));
    CHECK(moved.row(1).isApprox(Eigen::RowVector2d(-0.1, 0)));
    CHECK(moved.row(2).isApprox(Eigen::RowVector2d(0, 0.5)));
}

TEST_CASE("zero temperature uses the fallback solver epsilon") {
    FlowConfig cfg;
    cfg.epsilon = 0.0;
    CHECK(solver_epsilon(cfg) == 0.01);
    CHECK(noise_sigma(cfg) == 0.0);
    cfg.epsilon = 0.2;
    cfg.eta = 0.05;
    CHECK(solver_epsilon(cfg) == 0.2);
    CHECK(noise_sigma(cfg) == doctest::Approx(std::sqrt(0.02)));
}

TEST_CASE("tearing diagnostics") {
    FlowState s;
    Matrix X(2, 2);
    X << 0, 0, 3, 0;
    s.clouds.push_back(ParticleCloud(X));
    s.clouds.push_back(ParticleCloud(Matrix::Constant(5, 2, 1.0)));
    const auto d = tearing_diagnostics(s);
    CHECK(d[0].median_nn_distance == doctest::Approx(3.0));
    CHECK(d[0].min_nn_distance == doctest::Approx(3.0));
    CHECK(d[0].total_variance == doctest::Approx(2.25));
    CHECK(d[1].median_nn_distance == 0.0);
}

TEST_CASE("run_flow trace layout, determinism and weights") {
    const CausalGraph g = demo_graph();
    const FlowState init = demo_state(40, 400);
    FlowConfig cfg;
    cfg.steps = 25;
    cfg.snapshot_every = 10;
    cfg.seed = 5;
    const FlowResult a = run_flow(g, init, cfg);
    std::vector<int> steps;
    for (const auto& r : a.trace.rows) steps.push_back(r.step);
    CHECK(steps == std::vector<int>{0, 10, 20, 25});
    CHECK(a.final_state.step == 25);
    for (std::size_t v = 0; v < 3; ++v) CHECK(a.final_state.clouds[v].weights() == init.clouds[v].weights());

    const FlowResult b = run_flow(g, init, cfg);
    CHECK(format_trace_csv(a.trace) == format_trace_csv(b.trace));

    FlowConfig par = cfg;
    par.threads = 3;
    const FlowResult c = run_flow(g, init, par);
    for (std::size_t v = 0; v < 3; ++v)
        CHECK((center_of_mass(c.final_state.clouds[v]) - center_of_mass(a.final_state.clouds[v])).norm() <= 1e-12);

    const std::string csv = format_trace_csv(a.trace);
    CHECK(csv.rfind("step,total_energy,edge:A->B_cost,edge:B->C_cost,edge:A->C_cost,node:A_com_0,node:A_com_1,"
                    "node:A_var,node:A_nn_median,node:A_drift_norm",
                    0) == 0);

    FlowConfig none = cfg;
    none.steps = 0;
    const FlowResult z = run_flow(g, init, none);
    CHECK(z.trace.rows.size() == 1);
    CHECK(z.final_state.clouds[2].points() == init.clouds[2].points());
}

TEST_CASE("frozen nodes do not move") {
    const CausalGraph g = demo_graph();
    const FlowState init = demo_state(30, 500);
    FlowConfig cfg;
    cfg.steps = 10;
    cfg.frozen_nodes = {"C"};
    const FlowResult r = run_flow(g, init, cfg);
    CHECK(r.final_state.clouds[2].points() == init.clouds[2].points());
    CHECK(r.final_state.clouds[0].points() != init.clouds[0].points());
    cfg.frozen_nodes = {"nope"};
    CHECK_THROWS_AS(run_flow(g, init, cfg), Error);
}

TEST_CASE("coherent chain stays near its floor") {
    CausalGraph g;
    g.nodes = {{"A", 2}, {"B", 2}, {"C", 2}};
    g.edges.push_back({"A", "B", make_shift(Eigen::Vector2d(2, 0)), 1.0});
    g.edges.push_back({"B", "C", make_shift(Eigen::Vector2d(0, 2)), 1.0});
    FlowState s;
    s.clouds.push_back(sample_gaussian(Vector::Zero(2), Vector::Ones(2), 100, 600));
    s.clouds.push_back(pushforward(s.clouds[0], g.edges[0].mechanism));
    s.clouds.push_back(pushforward(s.clouds[1], g.edges[1].mechanism));
    FlowConfig cfg;
    cfg.steps = 200;
    const FlowResult r = run_flow(g, s, cfg);
    const double e0 = r.trace.rows.front().energy;
    CHECK(e0 < 0.2 * std::log(100.0));
    for (const auto& row : r.trace.rows) CHECK(row.energy <= 2.0 * e0);
}

TEST_CASE("blow-up aborts with the partial trace") {
    CausalGraph g;
    g.nodes = {{"U", 1}, {"V", 1}};
    g.edges.push_back({"U", "V", make_shift(Vector::Constant(1, 1.0)), 1.0});
    FlowState s;
    s.clouds.push_back(sample_gaussian(Vector::Zero(1), Vector::Ones(1), 10, 1));
    s.clouds.push_back(sample_gaussian(Vector::Constant(1, 3.0), Vector::Ones(1), 10, 2));
    FlowConfig cfg;
    cfg.eta = 5.0;
    cfg.steps = 2000;
    cfg.epsilon = 0.0;
    try {
        run_flow(g, s, cfg);
        FAIL("expected FlowAbort");
    } catch (const FlowAbort& a) {
        CHECK(a.code() == ErrorCode::FlowAborted);
        CHECK(a.step() > 0);
        CHECK(!a.partial_trace().rows.empty());
    }
}

TEST_CASE("flow input validation") {
    const CausalGraph g = demo_graph();
    FlowState s = demo_state(10, 1);
    FlowConfig cfg;
    cfg.eta = 0.0;
    CHECK_THROWS_AS(run_flow(g, s, cfg), Error);
    cfg.eta = 0.01;
    s.clouds.pop_back();
    CHECK_THROWS_AS(run_flow(g, s, cfg), Error);
}
