#pragma once
// Latent-confounder / high-dimensional-proxy laboratory: positivity holds on
// the latent score by construction, while propensities fit on the proxies
// drift to the extremes as the proxy dimension grows. Includes an in-sample
// logistic propensity fit, a dimension sweep, and a top-2 PCA projection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "catr/autodiff.hpp"
#include "catr/estimators.hpp"
#include "catr/rng.hpp"
#include "catr/util.hpp"

namespace catr::lab {

struct ProxySpec {
    int n = 2000;
    int latent_dim = 1;
    int p = 16;                    // proxy dimension
    double active_fraction = 0.25; // fraction of proxy coordinates loaded on C
    double noise_sd = 1.0;
    double slope = 1.0;            // treatment logit slope on the latent score
    std::uint64_t seed = 0;

    void validate() const {
        if (n < 2) throw std::invalid_argument("ProxySpec: n must be >= 2");
        if (latent_dim < 1) throw std::invalid_argument("ProxySpec: latent_dim >= 1");
        if (p < 1) throw std::invalid_argument("ProxySpec: p must be >= 1");
        if (active_fraction <= 0.0 || active_fraction > 1.0)
            throw std::invalid_argument("ProxySpec: active_fraction must lie in (0,1]");
        if (noise_sd < 0.0) throw std::invalid_argument("ProxySpec: noise_sd >= 0");
    }
};

struct LatentProxyData {
    std::vector<double> c;        // latent score, standard normal
    util::Matrix x;               // n x p proxies
    std::vector<std::uint8_t> t;
    std::vector<double> g_true;   // sigmoid(slope * c)
};

// X = c * v + noise with a sparse loading vector v; inactive coordinates are
// pure noise. With latent_dim > 1 the score is the normalized sum of the
// latent coordinates, each with its own loading.
inline LatentProxyData generate_latent_proxy(const ProxySpec& spec) {
    spec.validate();
    rng::Engine eng(rng::derive(spec.seed, 0x6c6162ull));
    const int k = spec.latent_dim;
    const int n_active = std::max(1, static_cast<int>(std::lround(
                                         spec.active_fraction * spec.p)));
    // choose active coordinates: deterministic partial shuffle
    std::vector<int> coords(static_cast<std::size_t>(spec.p));
    for (int j = 0; j < spec.p; ++j) coords[static_cast<std::size_t>(j)] = j;
    for (int j = 0; j < n_active; ++j) {
        const int r = j + static_cast<int>(eng.uniform_below(
                              static_cast<std::uint64_t>(spec.p - j)));
        std::swap(coords[static_cast<std::size_t>(j)], coords[static_cast<std::size_t>(r)]);
    }
    util::Matrix loading(k, spec.p);
    for (int l = 0; l < k; ++l)
        for (int j = 0; j < n_active; ++j)
            loading(l, coords[static_cast<std::size_t>(j)]) = eng.normal();

    LatentProxyData out;
    out.c.resize(static_cast<std::size_t>(spec.n));
    out.x = util::Matrix(spec.n, spec.p);
    out.t.resize(static_cast<std::size_t>(spec.n));
    out.g_true.resize(static_cast<std::size_t>(spec.n));
    const double inv_sqrt_k = 1.0 / std::sqrt(static_cast<double>(k));
    std::vector<double> latent(static_cast<std::size_t>(k));
    for (int i = 0; i < spec.n; ++i) {
        double score = 0.0;
        for (int l = 0; l < k; ++l) {
            latent[static_cast<std::size_t>(l)] = eng.normal();
            score += latent[static_cast<std::size_t>(l)];
        }
        score *= inv_sqrt_k;
        out.c[static_cast<std::size_t>(i)] = score;
        const double g = 1.0 / (1.0 + std::exp(-spec.slope * score));
        out.g_true[static_cast<std::size_t>(i)] = g;
        out.t[static_cast<std::size_t>(i)] = eng.bernoulli(g) ? 1 : 0;
        double* row = out.x.row(i);
        for (int j = 0; j < spec.p; ++j) {
            double v = spec.noise_sd * eng.normal();
            for (int l = 0; l < k; ++l)
                v += latent[static_cast<std::size_t>(l)] * loading(l, j);
            row[j] = v;
        }
    }
    return out;
}

namespace detail {

// Largest eigenvalue of X^T X / n by power iteration (for the GD step size).
inline double gram_spectral_bound(const util::Matrix& x) {
    const int n = x.rows, p = x.cols;
    rng::Engine eng(0x5eedull);
    std::vector<double> v(static_cast<std::size_t>(p));
    for (auto& e : v) e = eng.normal();
    std::vector<double> xv(static_cast<std::size_t>(n)), w(static_cast<std::size_t>(p));
    double lambda = 0.0;
    for (int it = 0; it < 50; ++it) {
        for (int i = 0; i < n; ++i) {
            const double* row = x.row(i);
            double s = 0.0;
            for (int j = 0; j < p; ++j) s += row[j] * v[static_cast<std::size_t>(j)];
            xv[static_cast<std::size_t>(i)] = s;
        }
        std::fill(w.begin(), w.end(), 0.0);
        for (int i = 0; i < n; ++i) {
            const double* row = x.row(i);
            const double s = xv[static_cast<std::size_t>(i)];
            for (int j = 0; j < p; ++j) w[static_cast<std::size_t>(j)] += row[j] * s;
        }
        double norm = 0.0;
        for (double e : w) norm += e * e;
        norm = std::sqrt(norm);
        if (norm == 0.0) return 1.0;
        lambda = norm / n;
        for (int j = 0; j < p; ++j) v[static_cast<std::size_t>(j)] = w[static_cast<std::size_t>(j)] / norm;
    }
    return lambda;
}

}  // namespace detail

// L2-regularized logistic regression (weights penalized, intercept free) by
// full-batch gradient descent; stops at gradient norm <= 1e-6 or 5000
// iterations. Returns in-sample propensities clamped like any sigmoid head.
inline std::vector<double> fit_logistic_ps(const util::Matrix& x,
                                           const std::vector<std::uint8_t>& t,
                                           double l2) {
    const int n = x.rows, p = x.cols;
    if (static_cast<int>(t.size()) != n)
        throw std::invalid_argument("fit_logistic_ps: label size mismatch");
    if (l2 < 0.0) throw std::invalid_argument("fit_logistic_ps: l2 must be >= 0");
    {
        bool has0 = false, has1 = false;
        for (auto v : t) (v == 1 ? has1 : has0) = true;
        if (!has0 || !has1)
            throw std::invalid_argument("fit_logistic_ps: a single treatment arm present");
    }
    std::vector<double> labels(t.begin(), t.end());
    std::vector<double> weights(static_cast<std::size_t>(p), 0.0);
    std::vector<double> bias{0.0};
    // logistic loss is (lambda_max/4 + l2)-smooth in the weights
    const double lr = 1.0 / (detail::gram_spectral_bound(x) / 4.0 + l2 + 1e-12);

    const std::span<const double> rows(x.a.data(), x.a.size());
    for (int it = 0; it < 5000; ++it) {
        ad::Tape tape;
        const ad::Var w = tape.leaf(weights);
        const ad::Var b = tape.leaf(bias);
        const ad::Var logits = tape.add_broadcast(tape.rows_matvec(rows, n, p, w), b);
        const ad::Var prob = tape.clamp(tape.sigmoid(logits), 1e-12, 1.0 - 1e-12);
        const ad::Var ce = tape.axpb(tape.sum(tape.bce(prob, labels)), 1.0 / n, 0.0);
        const ad::Var loss = tape.add(ce, tape.axpb(tape.dot(w, w), l2 / 2.0, 0.0));
        tape.backward(loss);
        const auto& gw = tape.grad(w);
        const auto& gb = tape.grad(b);
        double gnorm2 = gb[0] * gb[0];
        for (double g : gw) gnorm2 += g * g;
        if (std::sqrt(gnorm2) <= 1e-6) break;
        for (int j = 0; j < p; ++j) weights[static_cast<std::size_t>(j)] -= lr * gw[static_cast<std::size_t>(j)];
        bias[0] -= lr * gb[0];
    }

    std::vector<double> g_hat(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double* row = x.row(i);
        double z = bias[0];
        for (int j = 0; j < p; ++j) z += row[j] * weights[static_cast<std::size_t>(j)];
        double g = 1.0 / (1.0 + std::exp(-z));
        g_hat[static_cast<std::size_t>(i)] = std::min(std::max(g, 1e-6), 1.0 - 1e-6);
    }
    return g_hat;
}

struct SweepRow {
    int dim = 0;
    int repeat = 0;
    double clip_frac_hat = 0.0;
    double clip_frac_true = 0.0;
    double ess_ratio = 0.0;
};

// One generate+fit per (dim, repeat) with seeds derived from
// (spec.seed, dim, repeat); diagnostics on the fitted and true propensities.
inline std::vector<SweepRow> dimension_sweep(const std::vector<int>& dims,
                                             const ProxySpec& base, double eps,
                                             int repeats, double l2 = 1e-4) {
    if (dims.empty()) throw std::invalid_argument("dimension_sweep: dims empty");
    if (repeats < 1) throw std::invalid_argument("dimension_sweep: repeats >= 1");
    if (eps <= 0.0 || eps >= 0.5)
        throw std::invalid_argument("dimension_sweep: eps must lie in (0, 0.5)");
    std::vector<SweepRow> rows;
    rows.reserve(dims.size() * static_cast<std::size_t>(repeats));
    for (int dim : dims) {
        for (int rep = 0; rep < repeats; ++rep) {
            ProxySpec spec = base;
            spec.p = dim;
            spec.seed = rng::derive(base.seed, static_cast<std::uint64_t>(dim),
                                    static_cast<std::uint64_t>(rep));
            const auto data = generate_latent_proxy(spec);
            const auto g_hat = fit_logistic_ps(data.x, data.t, l2);
            SweepRow row;
            row.dim = dim;
            row.repeat = rep;
            row.clip_frac_hat = estimators::clipping_fraction(g_hat, eps);
            row.clip_frac_true = estimators::clipping_fraction(data.g_true, eps);
            row.ess_ratio = estimators::ess_ratio(g_hat, data.g_true, data.t);
            rows.push_back(row);
        }
    }
    return rows;
}

struct SweepSummary {
    int dim = 0;
    double mean_clip_hat = 0.0;
    double mean_clip_true = 0.0;
    double mean_ess_ratio = 0.0;
};

inline std::vector<SweepSummary> summarize_sweep(const std::vector<SweepRow>& rows) {
    std::vector<SweepSummary> out;
    for (const auto& r : rows) {
        if (out.empty() || out.back().dim != r.dim) out.push_back({r.dim, 0, 0, 0});
        auto& s = out.back();
        s.mean_clip_hat += r.clip_frac_hat;
        s.mean_clip_true += r.clip_frac_true;
        s.mean_ess_ratio += r.ess_ratio;
    }
    for (auto& s : out) {
        int count = 0;
        for (const auto& r : rows)
            if (r.dim == s.dim) ++count;
        s.mean_clip_hat /= count;
        s.mean_clip_true /= count;
        s.mean_ess_ratio /= count;
    }
    return out;
}

struct Pca2 {
    util::Matrix scores;        // n x 2 centered projections
    double lambda1 = 0.0, lambda2 = 0.0;
    bool second_rank_deficient = false;
};

// Top-2 principal components by power iteration with deflation; sign fixed
// so the first nonzero loading entry is positive.
inline Pca2 top2_pca(const util::Matrix& x) {
    const int n = x.rows, p = x.cols;
    if (n < 3 || p < 2) throw std::invalid_argument("top2_pca: need n >= 3, p >= 2");
    util::Matrix xc = x;
    for (int j = 0; j < p; ++j) {
        double m = 0.0;
        for (int i = 0; i < n; ++i) m += xc(i, j);
        m /= n;
        for (int i = 0; i < n; ++i) xc(i, j) -= m;
    }

    // cov * v without forming cov: Xc^T (Xc v) / (n-1)
    auto cov_apply = [&xc, n, p](const std::vector<double>& v,
                                 std::vector<double>& out) {
        std::vector<double> xv(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const double* row = xc.row(i);
            double s = 0.0;
            for (int j = 0; j < p; ++j) s += row[j] * v[static_cast<std::size_t>(j)];
            xv[static_cast<std::size_t>(i)] = s;
        }
        std::fill(out.begin(), out.end(), 0.0);
        for (int i = 0; i < n; ++i) {
            const double* row = xc.row(i);
            const double s = xv[static_cast<std::size_t>(i)];
            for (int j = 0; j < p; ++j) out[static_cast<std::size_t>(j)] += row[j] * s;
        }
        for (auto& e : out) e /= (n - 1);
    };

    auto power = [&cov_apply, p](const std::vector<double>* deflate_v,
                                 double deflate_lambda, double& lambda_out,
                                 std::vector<double>& v) {
        rng::Engine eng(0x70636132ull);
        v.assign(static_cast<std::size_t>(p), 0.0);
        for (auto& e : v) e = eng.normal();
        std::vector<double> next(static_cast<std::size_t>(p));
        double norm = 0.0;
        for (double e : v) norm += e * e;
        norm = std::sqrt(norm);
        for (auto& e : v) e /= norm;
        lambda_out = 0.0;
        for (int it = 0; it < 10000; ++it) {
            cov_apply(v, next);
            if (deflate_v) {
                double proj = 0.0;
                for (int j = 0; j < p; ++j)
                    proj += (*deflate_v)[static_cast<std::size_t>(j)] * v[static_cast<std::size_t>(j)];
                for (int j = 0; j < p; ++j)
                    next[static_cast<std::size_t>(j)] -=
                        deflate_lambda * proj * (*deflate_v)[static_cast<std::size_t>(j)];
            }
            norm = 0.0;
            for (double e : next) norm += e * e;
            norm = std::sqrt(norm);
            if (norm <= 1e-12) {
                lambda_out = 0.0;
                return;
            }
            double delta = 0.0;
            for (int j = 0; j < p; ++j) {
                const double nv = next[static_cast<std::size_t>(j)] / norm;
                delta = std::max(delta, std::fabs(nv - v[static_cast<std::size_t>(j)]));
                v[static_cast<std::size_t>(j)] = nv;
            }
            lambda_out = norm;
            if (delta <= 1e-8) break;
        }
        // Rayleigh quotient for the eigenvalue
        cov_apply(v, next);
        if (deflate_v) {
            double proj = 0.0;
            for (int j = 0; j < p; ++j)
                proj += (*deflate_v)[static_cast<std::size_t>(j)] * v[static_cast<std::size_t>(j)];
            for (int j = 0; j < p; ++j)
                next[static_cast<std::size_t>(j)] -=
                    deflate_lambda * proj * (*deflate_v)[static_cast<std::size_t>(j)];
        }
        lambda_out = 0.0;
        for (int j = 0; j < p; ++j)
            lambda_out += v[static_cast<std::size_t>(j)] * next[static_cast<std::size_t>(j)];
    };

    std::vector<double> v1, v2;
    Pca2 out;
    power(nullptr, 0.0, out.lambda1, v1);
    auto fix_sign = [p](std::vector<double>& v) {
        for (int j = 0; j < p; ++j) {
            const double e = v[static_cast<std::size_t>(j)];
            if (std::fabs(e) > 1e-12) {
                if (e < 0.0)
                    for (auto& q : v) q = -q;
                return;
            }
        }
    };
    fix_sign(v1);
    power(&v1, out.lambda1, out.lambda2, v2);
    if (out.lambda2 <= 1e-12) {
        out.second_rank_deficient = true;
        v2.assign(static_cast<std::size_t>(p), 0.0);
        out.lambda2 = 0.0;
    } else {
        fix_sign(v2);
    }

    out.scores = util::Matrix(n, 2);
    for (int i = 0; i < n; ++i) {
        const double* row = xc.row(i);
        double s1 = 0.0, s2 = 0.0;
        for (int j = 0; j < p; ++j) {
            s1 += row[j] * v1[static_cast<std::size_t>(j)];
            if (!out.second_rank_deficient) s2 += row[j] * v2[static_cast<std::size_t>(j)];
        }
        out.scores(i, 0) = s1;
        out.scores(i, 1) = s2;
    }
    return out;
}

// ---- CSV emitters ----

inline void write_sweep_csv(const std::vector<SweepRow>& rows,
                            const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_sweep_csv: cannot open " + path.string());
    out << "dim,repeat,clip_frac_hat,clip_frac_true,ess_ratio\n";
    for (const auto& r : rows)
        out << r.dim << ',' << r.repeat << ',' << util::fmt_double(r.clip_frac_hat)
            << ',' << util::fmt_double(r.clip_frac_true) << ','
            << util::fmt_double(r.ess_ratio) << '\n';
}

inline void write_pca_csv(const Pca2& pca, const std::vector<std::uint8_t>& t,
                          const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_pca_csv: cannot open " + path.string());
    out << "unit,pc1,pc2,t\n";
    for (int i = 0; i < pca.scores.rows; ++i)
        out << i << ',' << util::fmt_double(pca.scores(i, 0)) << ','
            << util::fmt_double(pca.scores(i, 1)) << ','
            << static_cast<int>(t[static_cast<std::size_t>(i)]) << '\n';
}

// Fixed 50-bin histogram over [0,1] of estimated vs true propensities.
inline void write_ps_hist_csv(const std::vector<double>& g_hat,
                              const std::vector<double>& g_true,
                              const std::filesystem::path& path) {
    constexpr int kBins = 50;
    std::vector<int> count_hat(kBins, 0), count_true(kBins, 0);
    auto bin_of = [](double g) {
        int b = static_cast<int>(g * kBins);
        return std::min(std::max(b, 0), kBins - 1);
    };
    for (double g : g_hat) count_hat[static_cast<std::size_t>(bin_of(g))] += 1;
    for (double g : g_true) count_true[static_cast<std::size_t>(bin_of(g))] += 1;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_ps_hist_csv: cannot open " + path.string());
    out << "bin_left,count_hat,count_true\n";
    for (int b = 0; b < kBins; ++b)
        out << util::fmt_double(static_cast<double>(b) / kBins) << ','
            << count_hat[static_cast<std::size_t>(b)] << ','
            << count_true[static_cast<std::size_t>(b)] << '\n';
}

}  // namespace catr::lab
