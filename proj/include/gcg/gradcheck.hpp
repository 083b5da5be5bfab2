#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "gcg/tensor.hpp"

namespace gcg {

/// Central-difference gradient of a scalar function, one coordinate at a time.
inline TensorD finite_diff_grad(const std::function<double(const TensorD&)>& f, const TensorD& x, double h = 1e-5) {
    TensorD grad(x.extents());
    TensorD probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double up = f(probe);
        probe[i] = orig - h;
        const double down = f(probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

struct GradComparison {
    double max_abs_error = 0.0;
    double max_rel_error = 0.0;  // over entries above the absolute floor
    bool ok = true;
};

/// Entry passes when |a - n| <= abs_floor or |a - n| / max(|a|, |n|) < rel_tol.
inline GradComparison compare_gradients(const TensorD& analytic, const TensorD& numeric, double rel_tol = 1e-4,
                                        double abs_floor = 1e-6) {
    GradComparison out;
    if (analytic.extents() != numeric.extents()) {
        out.ok = false;
        out.max_abs_error = out.max_rel_error = INFINITY;
        return out;
    }
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i], n = numeric[i];
        const double diff = std::abs(a - n);
        out.max_abs_error = std::max(out.max_abs_error, diff);
        if (!std::isfinite(diff)) {
            out.ok = false;
            out.max_rel_error = INFINITY;
            continue;
        }
        if (diff <= abs_floor) continue;
        const double rel = diff / std::max(std::abs(a), std::abs(n));
        out.max_rel_error = std::max(out.max_rel_error, rel);
        if (rel >= rel_tol) out.ok = false;
    }
    return out;
}

} // namespace gcg
