#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "sda/tensor.hpp"

// shared helpers for the test binaries

namespace sda::testing {

// Central finite-difference gradient check at 64-bit precision.
// make_loss rebuilds the forward graph from current leaf values; x is a leaf
// the loss depends on. Checks every element of x (or a strided subset when
// the tensor is large) against (L(x+h) - L(x-h)) / 2h.
inline int check_gradient(Tensor<double>& x, const std::function<Tensor<double>()>& make_loss,
                          double h = 1e-5, double tol = 1e-4, size_t max_checks = 64) {
    auto loss = make_loss();
    backward(loss);
    std::vector<double> g(x.grad().begin(), x.grad().end());

    auto d = x.mutable_data();
    size_t n = d.size();
    size_t stride = n <= max_checks ? 1 : n / max_checks;
    int checked = 0;
    for (size_t i = 0; i < n; i += stride) {
        double orig = d[i];
        d[i] = orig + h;
        double lp = make_loss().item();
        d[i] = orig - h;
        double lm = make_loss().item();
        d[i] = orig;
        double fd = (lp - lm) / (2 * h);
        double err = std::abs(g[i] - fd) / std::max({1.0, std::abs(fd), std::abs(g[i])});
        INFO("element ", i, ": autodiff ", g[i], " vs finite-diff ", fd);
        REQUIRE(err < tol);
        ++checked;
    }
    return checked;
}

// Wraps a non-scalar op output in a FIXED random weighted sum (weights drawn
// once, then frozen) so every output element receives a distinct gradient and
// the loss is a stable function across finite-difference re-evaluations.
inline int check_op_gradient(Tensor<double>& x, const std::function<Tensor<double>()>& fwd,
                             uint64_t weight_seed, double h = 1e-5, double tol = 1e-4,
                             size_t max_checks = 64) {
    auto probe = fwd();
    auto w = Tensor<double>::zeros(probe.shape(), false);
    {
        Rng wr(weight_seed);
        for (auto& v : w.mutable_data()) v = wr.gaussian();
    }
    return check_gradient(x, [&] { return sum_all(mul(fwd(), w)); }, h, tol, max_checks);
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double var_of(const std::vector<double>& v) {
    double m = mean_of(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
}

}  // namespace sda::testing
