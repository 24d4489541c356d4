#pragma once

// Central finite-difference verification of reverse-mode gradients.
// 64-bit mode only; reports, never asserts.

#include <cstdint>
#include <vector>

#include "vare/array.hpp"

namespace vare {

// Relative error per the harness contract:
// max over coordinates of |analytic - central| / (|analytic| + 1e-8).
inline double fd_rel_err(double analytic, double central) {
    return std::abs(analytic - central) / (std::abs(analytic) + 1e-8);
}

// fn maps the point to a scalar loss; every call re-runs the graph.
template <typename F>
double grad_check(F&& fn, Array64& point, double step = 1e-5) {
    point.set_requires_grad(true);
    point.zero_grad();
    {
        Array64 loss = fn(point);
        backward(loss);
    }
    std::vector<double> analytic = point.grad();
    double worst = 0.0;
    auto& vals = point.values();
    for (size_t i = 0; i < vals.size(); ++i) {
        const double x0 = vals[i];
        NoGrad ng;
        vals[i] = x0 + step;
        const double fp = fn(point).item();
        vals[i] = x0 - step;
        const double fm = fn(point).item();
        vals[i] = x0;
        const double central = (fp - fm) / (2.0 * step);
        worst = std::max(worst, fd_rel_err(analytic[i], central));
    }
    return worst;
}

// Same check over a set of parameter leaves, optionally subsampling
// coordinates (deterministic given the rng stream). fn takes no arguments;
// it closes over the leaves.
template <typename F>
double grad_check_params(F&& fn, const std::vector<Array64*>& leaves, double step,
                         int64_t max_coords_per_leaf, Rng& rng) {
    for (auto* leaf : leaves) {
        leaf->set_requires_grad(true);
        leaf->zero_grad();
    }
    {
        Array64 loss = fn();
        backward(loss);
    }
    double worst = 0.0;
    for (auto* leaf : leaves) {
        std::vector<double> analytic = leaf->grad();
        auto& vals = leaf->values();
        const int64_t n = int64_t(vals.size());
        std::vector<int64_t> coords;
        if (max_coords_per_leaf <= 0 || n <= max_coords_per_leaf) {
            coords.resize(size_t(n));
            for (int64_t i = 0; i < n; ++i) coords[size_t(i)] = i;
        } else {
            for (int64_t i = 0; i < max_coords_per_leaf; ++i)
                coords.push_back(rng.uniform_int(0, n - 1));
        }
        for (int64_t i : coords) {
            const double x0 = vals[size_t(i)];
            NoGrad ng;
            vals[size_t(i)] = x0 + step;
            const double fp = fn().item();
            vals[size_t(i)] = x0 - step;
            const double fm = fn().item();
            vals[size_t(i)] = x0;
            const double central = (fp - fm) / (2.0 * step);
            worst = std::max(worst, fd_rel_err(analytic[size_t(i)], central));
        }
    }
    return worst;
}

}  // namespace vare
