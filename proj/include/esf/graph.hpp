#pragma once

#include "esf/common.hpp"

#include <string>
#include <variant>
#include <vector>

namespace esf {

class Mechanism;

/// x + b
struct Shift {
    Vector b;
};

/// A x + b
struct Affine {
    Matrix A;
    Vector b;
};

/// x + W2 tanh(W1 x + b1). W2 is stored already rescaled so that the residual
/// branch is Lipschitz with constant at most `scale` < 1; build through
/// make_smooth_residual.
struct SmoothResidual {
    Matrix W1;
    Matrix W2;
    Vector b1;
    double scale = 0.0;
};

/// Stages applied left to right.
struct Composite {
    std::vector<Mechanism> stages;
};

/// Deterministic causal mechanism with analytic forward map and
/// vector-Jacobian product.
class Mechanism {
public:
    using Variant = std::variant<Shift, Affine, SmoothResidual, Composite>;

    Mechanism();  // zero-dimensional identity placeholder
    Mechanism(Shift s);
    Mechanism(Affine a);
    Mechanism(SmoothResidual r);
    Mechanism(Composite c);

    const Variant& variant() const { return v_; }

    int in_dim() const;
    int out_dim() const;

    Vector apply(const Eigen::Ref<const Vector>& x) const;
    /// J(x)^T w
    Vector vjp(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& w) const;
    /// Analytic Jacobian, out_dim x in_dim.
    Matrix jacobian(const Eigen::Ref<const Vector>& x) const;

    /// Row-wise versions over an N x D point matrix.
    Matrix apply_rows(const Matrix& X) const;
    Matrix vjp_rows(const Matrix& X, const Matrix& W) const;
    /// Row k = J(x_k) v_k.
    Matrix jvp_rows(const Matrix& X, const Matrix& V) const;

    bool is_translation() const;

private:
    Variant v_;
};

Mechanism make_shift(Vector b);
Mechanism make_affine(Matrix A, Vector b);
/// Rescales W2 by scale / (|W1| |W2|), spectral norms estimated by 20 steps
/// of power iteration. Requires 0 <= scale < 1 and W1: H x D, W2: D x H.
Mechanism make_smooth_residual(Matrix W1, Matrix W2, Vector b1, double scale);
Mechanism make_composite(std::vector<Mechanism> stages);

Vector apply_mechanism(const Mechanism& m, const Eigen::Ref<const Vector>& x);
Vector mechanism_vjp(const Mechanism& m, const Eigen::Ref<const Vector>& x,
                     const Eigen::Ref<const Vector>& w);
/// Central-difference Jacobian estimate. Test oracle.
Matrix mechanism_jacobian_fd(const Mechanism& m, const Eigen::Ref<const Vector>& x, double h);

/// Power-iteration estimate of the spectral norm.
double spectral_norm_estimate(const Matrix& A, int iters = 20);

struct NodeSpec {
    std::string name;
    int dim = 1;
};

struct EdgeSpec {
    std::string src;
    std::string dst;
    Mechanism mechanism;
    double weight = 1.0;

    std::string label() const { return src + "->" + dst; }
};

struct CausalGraph {
    std::vector<NodeSpec> nodes;
    std::vector<EdgeSpec> edges;

    /// Index of the named node, or -1.
    int node_index(const std::string& name) const;
    const NodeSpec& node(const std::string& name) const;
};

/// Checks endpoints, dims, weights, and acyclicity. Returns node indices in a
/// topological order (ties broken by declaration order).
std::vector<int> validate_graph(const CausalGraph& g);

/// Resolved edge endpoints; valid after validate_graph succeeds.
struct EdgeIndex {
    int src = -1;
    int dst = -1;
};
std::vector<EdgeIndex> edge_indices(const CausalGraph& g);

}  // namespace esf
