// Gaussian multi-kernel evaluation, its gradient, and bandwidth selection.
//
// The kernel is a convex combination of Gaussian base kernels
//   k(x, y) = sum_u beta_u * exp(-||x - y||^2 / (2 sigma_u^2)),
// with beta on the probability simplex. All MMD estimators are built on it.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include "ecan/common.hpp"

namespace ecan {

struct KernelSpec {
    std::vector<double> bandwidths;  // sigma_u, one per base kernel
    std::vector<double> weights;     // beta_u, non-negative, sums to 1

    int count() const { return static_cast<int>(bandwidths.size()); }

    void validate() const {
        require(!bandwidths.empty(), "KernelSpec: needs at least one base kernel");
        require(bandwidths.size() == weights.size(),
                "KernelSpec: bandwidths and weights must have equal length");
        double total = 0.0;
        for (double s : bandwidths)
            require(std::isfinite(s) && s > 0.0, "KernelSpec: bandwidths must be positive");
        for (double b : weights) {
            require(std::isfinite(b) && b >= 0.0, "KernelSpec: weights must be non-negative");
            total += b;
        }
        require(std::abs(total - 1.0) <= 1e-12, "KernelSpec: weights must sum to 1");
    }

    // Single Gaussian kernel with the given bandwidth.
    static KernelSpec single(double sigma) { return KernelSpec{{sigma}, {1.0}}; }
};

inline double multi_kernel_eval(const Vector& x, const Vector& y, const KernelSpec& spec) {
    spec.validate();
    require(x.size() == y.size(), "multi_kernel_eval: dimension mismatch");
    require(x.allFinite() && y.allFinite(), "multi_kernel_eval: inputs must be finite");
    const double d2 = (x - y).squaredNorm();
    double k = 0.0;
    for (int u = 0; u < spec.count(); ++u)
        k += spec.weights[u] * std::exp(-d2 / (2.0 * spec.bandwidths[u] * spec.bandwidths[u]));
    return k;
}

// Gradient of multi_kernel_eval with respect to x:
//   dk/dx = -sum_u (beta_u / sigma_u^2) k_u(x, y) (x - y).
inline Vector multi_kernel_grad(const Vector& x, const Vector& y, const KernelSpec& spec) {
    spec.validate();
    require(x.size() == y.size(), "multi_kernel_grad: dimension mismatch");
    require(x.allFinite() && y.allFinite(), "multi_kernel_grad: inputs must be finite");
    const Vector diff = x - y;
    const double d2 = diff.squaredNorm();
    double coeff = 0.0;
    for (int u = 0; u < spec.count(); ++u) {
        const double s2 = spec.bandwidths[u] * spec.bandwidths[u];
        coeff += spec.weights[u] / s2 * std::exp(-d2 / (2.0 * s2));
    }
    return -coeff * diff;
}

// Median heuristic: sigma such that 2 sigma^2 equals the median squared
// pairwise distance, i.e. the median-distance pair evaluates to e^{-1}.
// Falls back to sigma = 1 when all points coincide.
inline double median_bandwidth(const FeatureBatch& samples) {
    const auto n = samples.rows();
    if (n < 2) throw InsufficientData("median_bandwidth: needs at least 2 samples");
    require_finite(samples, "median_bandwidth: samples");
    std::vector<double> d2;
    d2.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j)
            d2.push_back((samples.row(i) - samples.row(j)).squaredNorm());
    std::sort(d2.begin(), d2.end());
    const std::size_t m = d2.size();
    const double median = (m % 2 == 1) ? d2[m / 2] : 0.5 * (d2[m / 2 - 1] + d2[m / 2]);
    if (median <= 0.0) return 1.0;
    return std::sqrt(median / 2.0);
}

// Default multi-kernel: `count` bandwidths in geometric steps of 2 around the
// median-heuristic sigma of the pooled samples, with uniform weights.
inline KernelSpec median_ladder_spec(const FeatureBatch& pooled, int count = 5) {
    require(count >= 1, "median_ladder_spec: count must be >= 1");
    const double sigma = median_bandwidth(pooled);
    KernelSpec spec;
    for (int i = 0; i < count; ++i)
        spec.bandwidths.push_back(sigma * std::pow(2.0, i - (count - 1) / 2.0));
    spec.weights.assign(static_cast<std::size_t>(count), 1.0 / count);
    return spec;
}

}  // namespace ecan
