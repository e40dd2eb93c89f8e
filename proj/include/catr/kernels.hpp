#pragma once
// Gram matrices, median-heuristic bandwidth, and the empirical HSIC
// statistic tr(K H L H)/(n-1)^2 computed without materializing H.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "catr/autodiff.hpp"

namespace catr::kernels {

enum class OutcomeKernel { rbf, linear };
enum class BandwidthMode { median_heuristic, fixed };

struct KernelConfig {
    OutcomeKernel outcome_kernel = OutcomeKernel::rbf;
    BandwidthMode bandwidth_mode = BandwidthMode::median_heuristic;
    double fixed_sigma = 1.0;       // used when bandwidth_mode == fixed
    double bandwidth_floor = 1e-3;

    void validate() const {
        if (bandwidth_floor <= 0.0)
            throw std::invalid_argument("KernelConfig: bandwidth_floor must be > 0");
        if (bandwidth_mode == BandwidthMode::fixed && fixed_sigma <= 0.0)
            throw std::invalid_argument("KernelConfig: fixed sigma must be > 0");
    }
};

// Row-major n x n Gram matrix.
struct Gram {
    int n = 0;
    std::vector<double> a;
    double& operator()(int i, int j) { return a[static_cast<std::size_t>(i) * n + j]; }
    double operator()(int i, int j) const { return a[static_cast<std::size_t>(i) * n + j]; }
};

inline Gram gram_linear(std::span<const double> u) {
    const int n = static_cast<int>(u.size());
    if (n < 2) throw std::invalid_argument("gram_linear: need n >= 2");
    Gram k{n, std::vector<double>(static_cast<std::size_t>(n) * n)};
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
            const double v = u[i] * u[j];
            k(i, j) = v;
            k(j, i) = v;
        }
    return k;
}

inline Gram gram_rbf(std::span<const double> u, double sigma) {
    const int n = static_cast<int>(u.size());
    if (n < 2) throw std::invalid_argument("gram_rbf: need n >= 2");
    if (sigma <= 0.0) throw std::invalid_argument("gram_rbf: sigma must be > 0");
    Gram l{n, std::vector<double>(static_cast<std::size_t>(n) * n)};
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int i = 0; i < n; ++i) {
        l(i, i) = 1.0;
        for (int j = 0; j < i; ++j) {
            const double d = u[i] - u[j];
            const double v = std::exp(-d * d * inv);
            l(i, j) = v;
            l(j, i) = v;
        }
    }
    return l;
}

// sigma = sqrt(median of pairwise squared distances), floored.
inline double median_heuristic(std::span<const double> u, double floor_) {
    const int n = static_cast<int>(u.size());
    if (n < 2) throw std::invalid_argument("median_heuristic: need n >= 2");
    std::vector<double> d2;
    d2.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double d = u[i] - u[j];
            d2.push_back(d * d);
        }
    const std::size_t m = d2.size();
    double med;
    if (m % 2 == 1) {
        std::nth_element(d2.begin(), d2.begin() + m / 2, d2.end());
        med = d2[m / 2];
    } else {
        std::nth_element(d2.begin(), d2.begin() + m / 2, d2.end());
        const double hi = d2[m / 2];
        std::nth_element(d2.begin(), d2.begin() + m / 2 - 1, d2.end());
        med = 0.5 * (d2[m / 2 - 1] + hi);
    }
    return std::max(std::sqrt(med), floor_);
}

// tr(K~ L~)/(n-1)^2 with K~ = HKH computed by mean subtraction.
inline double hsic_empirical(const Gram& k, const Gram& l) {
    if (k.n != l.n) throw std::invalid_argument("hsic_empirical: dimension mismatch");
    const int n = k.n;
    if (n < 2) throw std::invalid_argument("hsic_empirical: need n >= 2");

    auto centered = [n](const Gram& g) {
        std::vector<double> row(static_cast<std::size_t>(n), 0.0);
        double grand = 0.0;
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += g(i, j);
            row[static_cast<std::size_t>(i)] = s / n;
            grand += s;
        }
        grand /= static_cast<double>(n) * n;
        return std::pair{std::move(row), grand};
    };
    auto [krow, kgrand] = centered(k);
    auto [lrow, lgrand] = centered(l);

    // symmetric matrices: column means equal row means
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            const double kc = k(i, j) - krow[static_cast<std::size_t>(i)] -
                              krow[static_cast<std::size_t>(j)] + kgrand;
            const double lc = l(i, j) - lrow[static_cast<std::size_t>(i)] -
                              lrow[static_cast<std::size_t>(j)] + lgrand;
            s += kc * lc;
        }
        acc += s;
    }
    return acc / (static_cast<double>(n - 1) * (n - 1));
}

inline double resolve_sigma(std::span<const double> ry, const KernelConfig& cfg) {
    if (cfg.bandwidth_mode == BandwidthMode::fixed)
        return std::max(cfg.fixed_sigma, cfg.bandwidth_floor);
    return median_heuristic(ry, cfg.bandwidth_floor);
}

// Linear kernel on treatment residuals, configured kernel on outcome
// residuals; bandwidth from the median heuristic unless fixed.
inline double hsic_residual(std::span<const double> rt, std::span<const double> ry,
                            const KernelConfig& cfg) {
    cfg.validate();
    if (rt.size() != ry.size())
        throw std::invalid_argument("hsic_residual: size mismatch");
    if (rt.size() < 2) throw std::invalid_argument("hsic_residual: need n >= 2");
    const Gram k = gram_linear(rt);
    const Gram l = cfg.outcome_kernel == OutcomeKernel::rbf
                       ? gram_rbf(ry, resolve_sigma(ry, cfg))
                       : gram_linear(ry);
    return hsic_empirical(k, l);
}

// Differentiable counterpart on a tape; sigma is resolved from the current
// forward values and then held constant (stop-gradient).
inline ad::Var hsic_residual_node(ad::Tape& tape, ad::Var rt, ad::Var ry,
                                  const KernelConfig& cfg) {
    cfg.validate();
    const bool rbf = cfg.outcome_kernel == OutcomeKernel::rbf;
    const double sigma = rbf ? resolve_sigma(tape.val(ry), cfg) : 1.0;
    return tape.hsic(rt, ry, rbf, sigma);
}

}  // namespace catr::kernels
