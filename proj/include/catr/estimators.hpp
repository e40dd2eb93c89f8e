#pragma once
// Plug-in ATE estimators (outcome regression, inverse propensity weighting,
// augmented IPW), bootstrap inference over fixed nuisances, and positivity
// diagnostics (effective sample size ratio, clipping fraction).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "catr/rng.hpp"

namespace catr::estimators {

struct NuisanceEstimates {
    std::vector<double> g_hat;   // strictly inside (0,1)
    std::vector<double> q0_hat, q1_hat;

    std::size_t size() const { return g_hat.size(); }

    void validate() const {
        if (g_hat.size() != q0_hat.size() || g_hat.size() != q1_hat.size())
            throw std::invalid_argument("NuisanceEstimates: size mismatch");
        for (std::size_t i = 0; i < g_hat.size(); ++i) {
            if (!(g_hat[i] > 0.0 && g_hat[i] < 1.0))
                throw std::invalid_argument(
                    "NuisanceEstimates: g_hat[" + std::to_string(i) +
                    "] must lie strictly in (0,1)");
            if (!std::isfinite(q0_hat[i]) || !std::isfinite(q1_hat[i]))
                throw std::invalid_argument("NuisanceEstimates: q_hat[" +
                                            std::to_string(i) + "] is not finite");
        }
    }
};

struct EstimatorConfig {
    double clip = 0.0;        // epsilon; g <- min(max(g, eps), 1-eps) before weighting
    int bootstrap_b = 1000;
    std::uint64_t bootstrap_seed = 0;

    void validate() const {
        if (clip < 0.0 || clip >= 0.5)
            throw std::invalid_argument("EstimatorConfig: clip must lie in [0, 0.5)");
        if (bootstrap_b < 1)
            throw std::invalid_argument("EstimatorConfig: bootstrap_b must be >= 1");
    }
};

struct ATEReport {
    std::string estimator;
    double tau_hat = 0.0;
    double se = 0.0;
    double ci_lo = 0.0, ci_hi = 0.0;   // tau_hat +/- 1.96*se
    int b_used = 0;
    int b_missing = 0;   // single-arm resamples, dropped
    bool flagged = false;  // > 10% of resamples missing
};

inline double clip_propensity(double g, double eps) {
    return std::min(std::max(g, eps), 1.0 - eps);
}

// tau_OR = mean(q1 - q0).
inline double or_estimator(const NuisanceEstimates& nuis) {
    if (nuis.size() == 0) throw std::invalid_argument("or_estimator: empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < nuis.size(); ++i)
        s += nuis.q1_hat[i] - nuis.q0_hat[i];
    return s / static_cast<double>(nuis.size());
}

// tau_IPW = mean(t y / g - (1-t) y / (1-g)) with g clipped first.
inline double ipw_estimator(const NuisanceEstimates& nuis,
                            std::span<const std::uint8_t> t,
                            std::span<const float> y, const EstimatorConfig& cfg) {
    cfg.validate();
    const std::size_t n = nuis.size();
    if (n == 0) throw std::invalid_argument("ipw_estimator: empty input");
    if (t.size() != n || y.size() != n)
        throw std::invalid_argument("ipw_estimator: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double g = clip_propensity(nuis.g_hat[i], cfg.clip);
        s += t[i] == 1 ? y[i] / g : -y[i] / (1.0 - g);
    }
    return s / static_cast<double>(n);
}

// tau_AIPW = mean(t(y-q1)/g + q1 - (1-t)(y-q0)/(1-g) - q0).
inline double aipw_estimator(const NuisanceEstimates& nuis,
                             std::span<const std::uint8_t> t,
                             std::span<const float> y, const EstimatorConfig& cfg) {
    cfg.validate();
    const std::size_t n = nuis.size();
    if (n == 0) throw std::invalid_argument("aipw_estimator: empty input");
    if (t.size() != n || y.size() != n)
        throw std::invalid_argument("aipw_estimator: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double g = clip_propensity(nuis.g_hat[i], cfg.clip);
        const double q0 = nuis.q0_hat[i];
        const double q1 = nuis.q1_hat[i];
        const double psi1 = t[i] == 1 ? (y[i] - q1) / g + q1 : q1;
        const double psi0 = t[i] == 0 ? (y[i] - q0) / (1.0 - g) + q0 : q0;
        s += psi1 - psi0;
    }
    return s / static_cast<double>(n);
}

enum class EstimatorKind { or_, ipw, aipw };

inline const char* estimator_name(EstimatorKind k) {
    switch (k) {
        case EstimatorKind::or_: return "or";
        case EstimatorKind::ipw: return "ipw";
        case EstimatorKind::aipw: return "aipw";
    }
    return "?";
}

inline double apply_estimator(EstimatorKind kind, const NuisanceEstimates& nuis,
                              std::span<const std::uint8_t> t,
                              std::span<const float> y, const EstimatorConfig& cfg) {
    switch (kind) {
        case EstimatorKind::or_: return or_estimator(nuis);
        case EstimatorKind::ipw: return ipw_estimator(nuis, t, y, cfg);
        case EstimatorKind::aipw: return aipw_estimator(nuis, t, y, cfg);
    }
    throw std::logic_error("apply_estimator: unreachable");
}

// Resample unit indices with replacement; nuisances are treated as fixed
// per-unit columns (no refit). Resamples containing a single treatment arm
// are dropped; if more than 10% drop, the report is flagged. An optional
// refit hook replaces the nuisance columns per resample.
inline ATEReport bootstrap_report(
    EstimatorKind kind, const NuisanceEstimates& nuis,
    std::span<const std::uint8_t> t, std::span<const float> y,
    const EstimatorConfig& cfg,
    const std::function<NuisanceEstimates(const std::vector<int>&)>& refit = nullptr) {
    cfg.validate();
    nuis.validate();
    const int n = static_cast<int>(nuis.size());
    if (n == 0) throw std::invalid_argument("bootstrap_report: empty input");
    if (t.size() != nuis.size() || y.size() != nuis.size())
        throw std::invalid_argument("bootstrap_report: size mismatch");

    ATEReport rep;
    rep.estimator = estimator_name(kind);
    rep.tau_hat = apply_estimator(kind, nuis, t, y, cfg);

    std::vector<double> replicates;
    replicates.reserve(static_cast<std::size_t>(cfg.bootstrap_b));
    std::vector<int> idx(static_cast<std::size_t>(n));
    NuisanceEstimates rs;
    std::vector<std::uint8_t> rt(static_cast<std::size_t>(n));
    std::vector<float> ry(static_cast<std::size_t>(n));
    rs.g_hat.resize(static_cast<std::size_t>(n));
    rs.q0_hat.resize(static_cast<std::size_t>(n));
    rs.q1_hat.resize(static_cast<std::size_t>(n));

    for (int b = 0; b < cfg.bootstrap_b; ++b) {
        rng::Engine eng(rng::derive(cfg.bootstrap_seed, static_cast<std::uint64_t>(b),
                                    0x626f6f74ull));
        bool has0 = false, has1 = false;
        for (int i = 0; i < n; ++i) {
            const int j = static_cast<int>(eng.uniform_below(static_cast<std::uint64_t>(n)));
            idx[static_cast<std::size_t>(i)] = j;
            (t[static_cast<std::size_t>(j)] == 1 ? has1 : has0) = true;
        }
        if (!has0 || !has1) {
            rep.b_missing += 1;
            continue;
        }
        const NuisanceEstimates* src = &nuis;
        NuisanceEstimates refitted;
        if (refit) {
            refitted = refit(idx);
            src = &refitted;
        }
        for (int i = 0; i < n; ++i) {
            const int j = idx[static_cast<std::size_t>(i)];
            const bool own_rows = refit != nullptr;
            // refit hooks return nuisances already aligned to the resample
            const int row = own_rows ? i : j;
            rs.g_hat[static_cast<std::size_t>(i)] = src->g_hat[static_cast<std::size_t>(row)];
            rs.q0_hat[static_cast<std::size_t>(i)] = src->q0_hat[static_cast<std::size_t>(row)];
            rs.q1_hat[static_cast<std::size_t>(i)] = src->q1_hat[static_cast<std::size_t>(row)];
            rt[static_cast<std::size_t>(i)] = t[static_cast<std::size_t>(j)];
            ry[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(j)];
        }
        replicates.push_back(apply_estimator(kind, rs, rt, ry, cfg));
    }

    rep.b_used = static_cast<int>(replicates.size());
    rep.flagged = rep.b_missing > cfg.bootstrap_b / 10;
    if (replicates.size() >= 2) {
        double mean = 0.0;
        for (double v : replicates) mean += v;
        mean /= static_cast<double>(replicates.size());
        double ss = 0.0;
        for (double v : replicates) ss += (v - mean) * (v - mean);
        rep.se = std::sqrt(ss / static_cast<double>(replicates.size() - 1));
    } else {
        rep.se = 0.0;
        rep.flagged = true;
    }
    rep.ci_lo = rep.tau_hat - 1.96 * rep.se;
    rep.ci_hi = rep.tau_hat + 1.96 * rep.se;
    return rep;
}

// ESS(w) = (sum w)^2 / sum w^2.
inline double ess(std::span<const double> w) {
    double s = 0.0, s2 = 0.0;
    for (double v : w) {
        s += v;
        s2 += v * v;
    }
    if (s2 <= 0.0) throw std::invalid_argument("ess: zero weights");
    return s * s / s2;
}

// Ratio of estimated-weight ESS to true-weight ESS with
// w_i = t_i/g_i + (1-t_i)/(1-g_i).
inline double ess_ratio(std::span<const double> g_hat,
                        std::span<const double> g_true,
                        std::span<const std::uint8_t> t) {
    const std::size_t n = g_hat.size();
    if (g_true.size() != n || t.size() != n)
        throw std::invalid_argument("ess_ratio: size mismatch");
    if (n == 0) throw std::invalid_argument("ess_ratio: empty input");
    auto weights = [&t, n](std::span<const double> g) {
        std::vector<double> w(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (!(g[i] > 0.0 && g[i] < 1.0))
                throw std::invalid_argument(
                    "ess_ratio: propensity at index " + std::to_string(i) +
                    " is on the boundary; clip upstream");
            w[i] = t[i] == 1 ? 1.0 / g[i] : 1.0 / (1.0 - g[i]);
        }
        return w;
    };
    return ess(weights(g_hat)) / ess(weights(g_true));
}

// Fraction of units with g outside [eps, 1-eps].
inline double clipping_fraction(std::span<const double> g_hat, double eps) {
    if (eps <= 0.0 || eps >= 0.5)
        throw std::invalid_argument("clipping_fraction: eps must lie in (0, 0.5)");
    if (g_hat.empty()) throw std::invalid_argument("clipping_fraction: empty input");
    std::size_t k = 0;
    for (double g : g_hat)
        if (g < eps || g > 1.0 - eps) ++k;
    return static_cast<double>(k) / static_cast<double>(g_hat.size());
}

struct ReplicationAggregate {
    double mean_abs_bias = 0.0;
    double sd = 0.0;       // sample sd of tau_hat
    double avg_se = 0.0;
    double coverage = 0.0; // fraction of CIs containing tau_true
};

inline ReplicationAggregate replication_metrics(
    std::span<const std::pair<double, double>> estimates, double tau_true) {
    const std::size_t r = estimates.size();
    if (r < 2)
        throw std::invalid_argument("replication_metrics: need at least 2 replications");
    ReplicationAggregate agg;
    double mean_tau = 0.0;
    for (const auto& [tau, se] : estimates) {
        agg.mean_abs_bias += std::fabs(tau - tau_true);
        agg.avg_se += se;
        mean_tau += tau;
        if (tau_true >= tau - 1.96 * se && tau_true <= tau + 1.96 * se)
            agg.coverage += 1.0;
    }
    const double rf = static_cast<double>(r);
    agg.mean_abs_bias /= rf;
    agg.avg_se /= rf;
    agg.coverage /= rf;
    mean_tau /= rf;
    double ss = 0.0;
    for (const auto& [tau, se] : estimates) ss += (tau - mean_tau) * (tau - mean_tau);
    agg.sd = std::sqrt(ss / (rf - 1.0));
    return agg;
}

}  // namespace catr::estimators
