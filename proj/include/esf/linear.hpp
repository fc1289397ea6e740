#pragma once

#include "esf/common.hpp"

#include <cmath>

namespace esf {

/// <u, v>_w = sum_k w_k u_k v_k; an empty weight vector means Euclidean.
inline double weighted_dot(const Vector& u, const Vector& v, const Vector& w) {
    if (w.size() == 0) return u.dot(v);
    return (u.array() * v.array() * w.array()).sum();
}

struct CgResult {
    Vector x;
    int iterations = 0;
    double residual = 0.0;  ///< |b - A x|_w / |b|_w
    bool converged = false;
};

/// Conjugate gradients for an operator self-adjoint and positive semidefinite
/// in the w-weighted inner product. `project` is applied to the right-hand
/// side and every search direction, which keeps iterates off a known kernel.
template <class Op, class Proj>
CgResult conjugate_gradient(const Op& apply, const Vector& b, const Vector& w, const Proj& project, double tol,
                            int max_iters, const Vector* x0 = nullptr) {
    CgResult out;
    Vector rhs = b;
    project(rhs);
    const double bnorm = std::sqrt(weighted_dot(rhs, rhs, w));
    out.x = x0 ? *x0 : Vector::Zero(b.size());
    if (bnorm == 0.0) {
        out.x.setZero();
        out.converged = true;
        return out;
    }
    project(out.x);
    Vector r = rhs - apply(out.x);
    project(r);
    Vector p = r;
    double rr = weighted_dot(r, r, w);
    for (int it = 0; it < max_iters; ++it) {
        if (std::sqrt(rr) <= tol * bnorm) break;
        Vector Ap = apply(p);
        const double pAp = weighted_dot(p, Ap, w);
        if (!(pAp > 0.0)) break;
        const double alpha = rr / pAp;
        out.x += alpha * p;
        r -= alpha * Ap;
        project(r);
        const double rr_next = weighted_dot(r, r, w);
        p = r + (rr_next / rr) * p;
        project(p);
        rr = rr_next;
        out.iterations = it + 1;
    }
    // True residual, not the recursively updated one.
    Vector res = rhs - apply(out.x);
    project(res);
    out.residual = std::sqrt(weighted_dot(res, res, w)) / bnorm;
    out.converged = out.residual <= 10.0 * tol;
    return out;
}

}  // namespace esf
