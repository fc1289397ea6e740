#include "esf/measures.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <filesystem>
#include <string>

using namespace esf;

TEST_CASE("gaussian sampling") {
    const ParticleCloud c = sample_gaussian(Eigen::Vector2d(8, 0), Eigen::Vector2d(1, 1), 300, 7);
    CHECK(c.size() == 300);
    CHECK((center_of_mass(c) - Eigen::Vector2d(8, 0)).cwiseAbs().maxCoeff() <= 3.0 / std::sqrt(300.0));
    CHECK((c.weights().array() == 1.0 / 300.0).all());

    const ParticleCloud d = sample_gaussian(Eigen::Vector2d(8, 0), Eigen::Vector2d(1, 1), 300, 7);
    CHECK(c.points() == d.points());

    const ParticleCloud e = sample_gaussian(Eigen::Vector2d(8, 0), Eigen::Vector2d(1, 1), 300, 8);
    CHECK(c.points() != e.points());

    const ParticleCloud z = sample_gaussian(Eigen::Vector2d(1.5, -2), Eigen::Vector2d(0, 0), 10, 3);
    for (Eigen::Index i = 0; i < z.size(); ++i) CHECK(z.points().row(i) == Eigen::RowVector2d(1.5, -2));

    CHECK_THROWS_AS(sample_gaussian(Eigen::Vector2d(0, 0), Eigen::Vector2d(1, 1), 0, 1), Error);
    CHECK_THROWS_AS(sample_gaussian(Eigen::Vector2d(0, 0), Eigen::Vector2d(-1, 1), 5, 1), Error);
}

TEST_CASE("cloud invariants are enforced") {
    Matrix X(2, 1);
    X << 0, 1;
    CHECK_THROWS_AS(ParticleCloud(X, Eigen::Vector2d(0.5, 0.6)), Error);
    CHECK_THROWS_AS(ParticleCloud(X, Eigen::Vector2d(1.5, -0.5)), Error);
    X(1, 0) = std::nan("");
    CHECK_THROWS_AS(ParticleCloud{X}, Error);
    CHECK_THROWS_AS(ParticleCloud{Matrix(0, 2)}, Error);
}

TEST_CASE("pushforward") {
    const ParticleCloud origin(Matrix::Zero(5, 2));
    const ParticleCloud moved = pushforward(origin, make_shift(Eigen::Vector2d(4, -4)));
    for (Eigen::Index i = 0; i < 5; ++i) CHECK(moved.points().row(i) == Eigen::RowVector2d(4, -4));

    std::mt19937_64 rng(9);
    const ParticleCloud c = oracle::random_cloud(40, 2, rng, 0.0, false);
    const ParticleCloud same = pushforward(c, make_affine(Matrix::Identity(2, 2), Vector::Zero(2)));
    CHECK(same.points() == c.points());

    const Mechanism r = make_smooth_residual(oracle::gaussian_matrix(4, 2, rng), oracle::gaussian_matrix(2, 4, rng),
                                             oracle::gaussian_vector(4, rng), 0.8);
    const ParticleCloud p = pushforward(c, r);
    CHECK(p.weights() == c.weights());
    CHECK(p.weights().sum() == doctest::Approx(1.0).epsilon(1e-15));

    CHECK_THROWS_AS(pushforward(c, make_shift(Vector::Ones(3))), Error);
}

TEST_CASE("center of mass and total variance") {
    Matrix X(2, 2);
    X << 0, 0, 2, 0;
    CHECK(center_of_mass(ParticleCloud(X)).isApprox(Eigen::Vector2d(1, 0)));
    CHECK(center_of_mass(ParticleCloud(Matrix::Constant(1, 2, 3.0))) == Eigen::Vector2d(3, 3));

    CHECK(total_variance(ParticleCloud(Matrix::Constant(6, 2, -1.0))) == 0.0);
    Matrix Y(2, 2);
    Y << 1, 0, -1, 0;
    CHECK(total_variance(ParticleCloud(Y)) == doctest::Approx(1.0));

    const ParticleCloud g = sample_gaussian(Vector::Zero(2), Vector::Ones(2), 2000, 11);
    CHECK(std::abs(total_variance(g) - 2.0) <= 0.05 * 2.0);
}

TEST_CASE("shift equivariance of summaries") {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 10; ++trial) {
        const ParticleCloud c = oracle::random_cloud(50, 3, rng, 0.0, trial % 2 == 0);
        const Vector b = oracle::gaussian_vector(3, rng, 3.0);
        const ParticleCloud s = pushforward(c, make_shift(b));
        CHECK((center_of_mass(s) - center_of_mass(c) - b).norm() < 1e-12);
        CHECK(total_variance(s) == doctest::Approx(total_variance(c)).epsilon(1e-12));
        CHECK(s.weights().sum() == c.weights().sum());
    }
}

TEST_CASE("nearest neighbour distances") {
    Matrix X(2, 2);
    X << 0, 0, 3, 0;
    const Vector d = nearest_neighbor_distances(ParticleCloud(X));
    CHECK(d[0] == doctest::Approx(3.0));
    CHECK(d[1] == doctest::Approx(3.0));
    CHECK(nearest_neighbor_distances(ParticleCloud(Matrix::Zero(4, 2))).maxCoeff() == 0.0);

    // brute-force check on a random cloud
    std::mt19937_64 rng(12);
    const ParticleCloud c = oracle::random_cloud(30, 2, rng);
    const Matrix D = oracle::squared_distances(c.points(), c.points());
    const Vector nn = nearest_neighbor_distances(c);
    for (Eigen::Index i = 0; i < 30; ++i) {
        double best = 1e300;
        for (Eigen::Index j = 0; j < 30; ++j)
            if (j != i) best = std::min(best, D(i, j));
        CHECK(nn[i] == doctest::Approx(std::sqrt(best)).epsilon(1e-12));
    }
}

TEST_CASE("cloud csv round trip and parse errors") {
    std::mt19937_64 rng(13);
    const ParticleCloud c = oracle::random_cloud(25, 3, rng, 0.0, false);
    const auto path = (std::filesystem::temp_directory_path() / "esf_cloud_roundtrip.csv").string();
    store_cloud(c, path);
    const ParticleCloud back = load_cloud(path);
    CHECK(back.points() == c.points());
    CHECK((back.weights() - c.weights()).cwiseAbs().maxCoeff() <= 1e-16);
    std::filesystem::remove(path);

    try {
        parse_cloud_csv("x0,x1\n1,2\n3\n");
        FAIL("expected a parse error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ParseError);
        CHECK(std::string(e.what()).find("row 3") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_cloud_csv("x0,x1\n1,abc\n"), Error);
    CHECK_THROWS_AS(parse_cloud_csv(""), Error);

    std::vector<std::string> warnings;
    const ParticleCloud w = parse_cloud_csv("x0,w\n0,1\n1,3\n", &warnings);
    CHECK(w.weights()[0] == doctest::Approx(0.25));
    CHECK(w.weights()[1] == doctest::Approx(0.75));
    CHECK(warnings.size() == 1);

    warnings.clear();
    parse_cloud_csv("x0,w\n0,0.5\n1,0.5\n", &warnings);
    CHECK(warnings.empty());
    CHECK_THROWS_AS(load_cloud("/nonexistent/cloud.csv"), Error);
}
