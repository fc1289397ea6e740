#pragma once

#include "esf/common.hpp"
#include "esf/graph.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace esf {

/// Weighted empirical measure: N points in R^D with masses summing to one.
class ParticleCloud {
public:
    ParticleCloud() = default;
    /// Uniform weights.
    explicit ParticleCloud(Matrix points);
    /// Validates finiteness, nonnegativity and unit total mass (within 1e-12).
    ParticleCloud(Matrix points, Vector weights);

    const Matrix& points() const { return points_; }
    Matrix& mutable_points() { return points_; }
    const Vector& weights() const { return weights_; }

    Eigen::Index size() const { return points_.rows(); }
    int dim() const { return int(points_.cols()); }
    bool empty() const { return points_.rows() == 0; }

private:
    Matrix points_;
    Vector weights_;
};

ParticleCloud sample_gaussian(const Vector& mean, const Vector& cov_diag, Eigen::Index n, std::uint64_t seed);

ParticleCloud pushforward(const ParticleCloud& c, const Mechanism& m);

Vector center_of_mass(const ParticleCloud& c);

/// Trace of the weighted covariance.
double total_variance(const ParticleCloud& c);

/// Per-particle Euclidean distance to the nearest other particle.
Vector nearest_neighbor_distances(const ParticleCloud& c);

enum class CloudFormat { Csv };

/// CSV with header x0,...,x{D-1}[,w]. Weights are renormalized to sum 1; a
/// warning is appended when the stored sum drifts from 1 by more than 1e-6.
ParticleCloud load_cloud(const std::string& path, CloudFormat format = CloudFormat::Csv,
                         std::vector<std::string>* warnings = nullptr);
/// Writes 17 significant digits, so a round trip is exact.
void store_cloud(const ParticleCloud& c, const std::string& path, CloudFormat format = CloudFormat::Csv);

ParticleCloud parse_cloud_csv(const std::string& text, std::vector<std::string>* warnings = nullptr);
std::string format_cloud_csv(const ParticleCloud& c);

}  // namespace esf
