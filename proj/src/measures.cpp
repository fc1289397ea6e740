#include "esf/measures.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>

namespace esf {

ParticleCloud::ParticleCloud(Matrix points)
    : points_(std::move(points)),
      weights_(Vector::Constant(points_.rows(), points_.rows() > 0 ? 1.0 / double(points_.rows()) : 0.0)) {
    if (points_.rows() < 1) throw Error(ErrorCode::InvalidArgument, "particle cloud needs at least one point");
    if (!points_.allFinite()) throw Error(ErrorCode::InvalidArgument, "particle cloud has non-finite coordinates");
}

ParticleCloud::ParticleCloud(Matrix points, Vector weights) : points_(std::move(points)), weights_(std::move(weights)) {
    if (points_.rows() < 1) throw Error(ErrorCode::InvalidArgument, "particle cloud needs at least one point");
    if (weights_.size() != points_.rows())
        throw Error(ErrorCode::DimMismatch, "particle cloud: weight count differs from point count");
    if (!points_.allFinite()) throw Error(ErrorCode::InvalidArgument, "particle cloud has non-finite coordinates");
    if (!weights_.allFinite() || (weights_.array() < 0.0).any())
        throw Error(ErrorCode::InvalidArgument, "particle cloud weights must be finite and nonnegative");
    if (std::abs(weights_.sum() - 1.0) > 1e-12)
        throw Error(ErrorCode::InvalidArgument, "particle cloud weights must sum to 1");
}

ParticleCloud sample_gaussian(const Vector& mean, const Vector& cov_diag, Eigen::Index n, std::uint64_t seed) {
    if (n < 1) throw Error(ErrorCode::InvalidArgument, "sample_gaussian: n must be >= 1");
    if (mean.size() != cov_diag.size()) throw Error(ErrorCode::DimMismatch, "sample_gaussian: mean/cov size mismatch");
    if ((cov_diag.array() < 0.0).any()) throw Error(ErrorCode::InvalidArgument, "sample_gaussian: negative variance");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const Vector sd = cov_diag.array().sqrt();
    Matrix X(n, mean.size());
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index d = 0; d < mean.size(); ++d) X(i, d) = mean[d] + sd[d] * normal(rng);
    return ParticleCloud(std::move(X));
}

ParticleCloud pushforward(const ParticleCloud& c, const Mechanism& m) {
    return ParticleCloud(m.apply_rows(c.points()), c.weights());
}

Vector center_of_mass(const ParticleCloud& c) { return c.points().transpose() * c.weights(); }

double total_variance(const ParticleCloud& c) {
    const Vector com = center_of_mass(c);
    return ((c.points().rowwise() - com.transpose()).rowwise().squaredNorm().transpose() * c.weights())(0);
}

Vector nearest_neighbor_distances(const ParticleCloud& c) {
    const Eigen::Index n = c.size();
    Vector d = Vector::Constant(n, std::numeric_limits<double>::infinity());
    const Matrix& X = c.points();
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double dist = (X.row(i) - X.row(j)).squaredNorm();
            d[i] = std::min(d[i], dist);
            d[j] = std::min(d[j], dist);
        }
    return d.array().sqrt();
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) {
        const auto b = field.find_first_not_of(" \t\r");
        const auto e = field.find_last_not_of(" \t\r");
        out.push_back(b == std::string::npos ? std::string() : field.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

ParticleCloud parse_cloud_csv(const std::string& text, std::vector<std::string>* warnings) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::ParseError, "empty cloud file");
    const auto header = split_csv_line(line);
    std::size_t dim = 0;
    bool has_weight = false;
    for (std::size_t k = 0; k < header.size(); ++k) {
        if (header[k] == "x" + std::to_string(k)) {
            if (has_weight) throw Error(ErrorCode::ParseError, "header: weight column must be last");
            ++dim;
        } else if (header[k] == "w" && k + 1 == header.size()) {
            has_weight = true;
        } else {
            throw Error(ErrorCode::ParseError, "header column " + std::to_string(k + 1) + ": unexpected '" + header[k] + "'");
        }
    }
    if (dim == 0) throw Error(ErrorCode::ParseError, "header declares no coordinate columns");

    std::vector<double> values;
    std::vector<double> w;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != header.size())
            throw Error(ErrorCode::ParseError, "row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                                                   " columns, found " + std::to_string(fields.size()));
        for (std::size_t k = 0; k < fields.size(); ++k) {
            double v = 0.0;
            try {
                std::size_t used = 0;
                v = std::stod(fields[k], &used);
                if (used != fields[k].size()) throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                throw Error(ErrorCode::ParseError, "row " + std::to_string(row) + ", column " + std::to_string(k + 1) +
                                                       ": cannot parse '" + fields[k] + "'");
            }
            if (!std::isfinite(v))
                throw Error(ErrorCode::ParseError,
                            "row " + std::to_string(row) + ", column " + std::to_string(k + 1) + ": non-finite value");
            if (k < dim)
                values.push_back(v);
            else
                w.push_back(v);
        }
    }
    const Eigen::Index n = Eigen::Index(values.size() / dim);
    if (n == 0) throw Error(ErrorCode::ParseError, "cloud file has no data rows");
    Matrix X = Eigen::Map<const RowMatrix>(values.data(), n, Eigen::Index(dim));
    if (!has_weight) return ParticleCloud(std::move(X));

    Vector wv = Eigen::Map<const Vector>(w.data(), n);
    if ((wv.array() < 0.0).any()) throw Error(ErrorCode::ParseError, "weight column has negative entries");
    const double total = wv.sum();
    if (!(total > 0.0)) throw Error(ErrorCode::ParseError, "weight column sums to zero");
    if (std::abs(total - 1.0) > 1e-6 && warnings) {
        std::ostringstream os;
        os << "weights summed to " << std::setprecision(17) << total << "; renormalized";
        warnings->push_back(os.str());
    }
    // Sums already within rounding of 1 are kept bit-exact.
    if (std::abs(total - 1.0) > 1e-12) wv /= total;
    return ParticleCloud(std::move(X), std::move(wv));
}

std::string format_cloud_csv(const ParticleCloud& c) {
    std::ostringstream os;
    os << std::setprecision(17);
    for (int d = 0; d < c.dim(); ++d) os << (d ? "," : "") << 'x' << d;
    os << ",w\n";
    for (Eigen::Index i = 0; i < c.size(); ++i) {
        for (int d = 0; d < c.dim(); ++d) os << (d ? "," : "") << c.points()(i, d);
        os << ',' << c.weights()[i] << '\n';
    }
    return os.str();
}

ParticleCloud load_cloud(const std::string& path, CloudFormat, std::vector<std::string>* warnings) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return parse_cloud_csv(buf.str(), warnings);
    } catch (const Error& e) {
        throw Error(e.code(), path + ": " + e.what());
    }
}

void store_cloud(const ParticleCloud& c, const std::string& path, CloudFormat) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoError, "cannot write '" + path + "'");
    out << format_cloud_csv(c);
}

}  // namespace esf
