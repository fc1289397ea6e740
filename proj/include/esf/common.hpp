#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace esf {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
// Row-major storage for N x M kernel-sized arrays; row sweeps are the hot loop.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ErrorCode {
    DimMismatch,
    CycleDetected,
    UnknownNode,
    DuplicateNode,
    InvalidArgument,
    NonConvergence,
    NonFiniteCost,
    SolverStalled,
    FlowAborted,
    ParseError,
    IoError,
    ConfigError,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace esf
