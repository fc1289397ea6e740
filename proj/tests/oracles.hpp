#pragma once

// Reference implementations used only by the tests. None of these call into
// the solver code they are checking.

#include "esf/common.hpp"
#include "esf/measures.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

namespace oracle {

using esf::Matrix;
using esf::Vector;

// Minimum-cost perfect assignment on a square cost matrix (Kuhn-Munkres with
// potentials, O(n^3)). Returns the total cost.
inline double assignment_cost(const Matrix& C) {
    const int n = int(C.rows());
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = C(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    double total = 0.0;
    for (int j = 1; j <= n; ++j) total += C(p[j] - 1, j - 1);
    return total;
}

inline Matrix squared_distances(const Matrix& X, const Matrix& Y) {
    Matrix C(X.rows(), Y.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i)
        for (Eigen::Index j = 0; j < Y.rows(); ++j) C(i, j) = (X.row(i) - Y.row(j)).squaredNorm();
    return C;
}

// Exact squared 2-Wasserstein distance between two uniform clouds of equal size.
inline double exact_w2_uniform(const Matrix& X, const Matrix& Y) {
    return assignment_cost(squared_distances(X, Y)) / double(X.rows());
}

// Dense matrix of a linear map given as a function on flat vectors.
inline Matrix assemble(const std::function<Vector(const Vector&)>& op, Eigen::Index in_dim) {
    Matrix out;
    for (Eigen::Index k = 0; k < in_dim; ++k) {
        Vector e = Vector::Zero(in_dim);
        e[k] = 1.0;
        const Vector col = op(e);
        if (k == 0) out.resize(col.size(), in_dim);
        out.col(k) = col;
    }
    return out;
}

inline Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> n(0.0, sd);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
    return m;
}

inline Vector gaussian_vector(Eigen::Index n, std::mt19937_64& rng, double sd = 1.0) {
    return gaussian_matrix(n, 1, rng, sd).col(0);
}

// Strictly positive random weights summing to one.
inline Vector random_simplex(Eigen::Index n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.5, 1.5);
    Vector w(n);
    for (Eigen::Index i = 0; i < n; ++i) w[i] = u(rng);
    return w / w.sum();
}

inline esf::ParticleCloud random_cloud(Eigen::Index n, int dim, std::mt19937_64& rng, double shift = 0.0,
                                       bool uniform = true) {
    Matrix X = gaussian_matrix(n, dim, rng);
    X.array() += shift;
    if (uniform) return esf::ParticleCloud(X);
    return esf::ParticleCloud(X, random_simplex(n, rng));
}

// Central-difference gradient of a scalar function of a point matrix.
inline Matrix fd_gradient(const std::function<double(const Matrix&)>& fn, const Matrix& X, double h) {
    Matrix G(X.rows(), X.cols());
    Matrix Xp = X;
    for (Eigen::Index i = 0; i < X.rows(); ++i)
        for (Eigen::Index d = 0; d < X.cols(); ++d) {
            Xp(i, d) = X(i, d) + h;
            const double up = fn(Xp);
            Xp(i, d) = X(i, d) - h;
            const double dn = fn(Xp);
            Xp(i, d) = X(i, d);
            G(i, d) = (up - dn) / (2.0 * h);
        }
    return G;
}

inline double rel_err(const Matrix& a, const Matrix& ref) {
    const double denom = ref.norm();
    return denom > 0.0 ? (a - ref).norm() / denom : (a - ref).norm();
}

}  // namespace oracle
