#pragma once
// Token selection: per-token scores from a context-aware scorer, relaxed
// Bernoulli (binary concrete) gate sampling, deterministic evaluation
// masks, and sparsity penalties over the gates.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "catr/autodiff.hpp"
#include "catr/nets.hpp"
#include "catr/rng.hpp"

namespace catr::rationalizer {

inline constexpr double kLogClamp = 1e-6;

enum class SparsityKind { entropy, entropy_full, kl_to_prior, l1 };

struct SparsityConfig {
    SparsityKind kind = SparsityKind::entropy;
    double prior = 0.3;   // pi, kl_to_prior only
    double weight = 0.1;  // mu

    void validate() const {
        if (weight < 0.0)
            throw std::invalid_argument("SparsityConfig: weight must be >= 0");
        if (kind == SparsityKind::kl_to_prior && (prior <= 0.0 || prior >= 1.0))
            throw std::invalid_argument("SparsityConfig: prior must lie in (0,1)");
    }
};

enum class MaskMode { threshold, top_k, soft };

struct MaskSample {
    std::vector<double> scores;  // a, per real token
    std::vector<double> gates;   // s, same length
};

// Mean of the first `length` token embeddings (f32 rows, d columns).
inline std::vector<double> mean_embedding(std::span<const float> seq, int length,
                                          int d) {
    std::vector<double> ctx(static_cast<std::size_t>(d), 0.0);
    for (int j = 0; j < length; ++j) {
        const float* row = seq.data() + static_cast<std::size_t>(j) * d;
        for (int k = 0; k < d; ++k) ctx[static_cast<std::size_t>(k)] += row[k];
    }
    for (auto& v : ctx) v /= length;
    return ctx;
}

// a_j = sigmoid(scorer([e_j ; mean-pooled sequence])). Scorer input width
// must equal 2*d; its sigmoid output is clamped by the net layer.
inline std::vector<double> score_tokens(const nets::FeedforwardNet& selector,
                                        std::span<const float> seq, int length,
                                        int d) {
    if (length < 1) throw std::invalid_argument("score_tokens: length must be >= 1");
    if (selector.input_width() != 2 * d)
        throw std::invalid_argument("score_tokens: selector input width != 2d");
    const auto ctx = mean_embedding(seq, length, d);
    std::vector<double> input(static_cast<std::size_t>(2 * d));
    std::copy(ctx.begin(), ctx.end(), input.begin() + d);
    std::vector<double> scores(static_cast<std::size_t>(length));
    for (int j = 0; j < length; ++j) {
        const float* row = seq.data() + static_cast<std::size_t>(j) * d;
        for (int k = 0; k < d; ++k) input[static_cast<std::size_t>(k)] = row[k];
        scores[static_cast<std::size_t>(j)] = nets::forward(selector, input)[0];
    }
    return scores;
}

// Binary-concrete gate: s = sigmoid((logit(a) + log u - log(1-u)) / eta).
inline std::vector<double> sample_relaxed_mask(std::span<const double> a,
                                               double eta, rng::Engine& eng) {
    if (eta <= 0.0)
        throw std::invalid_argument("sample_relaxed_mask: eta must be > 0");
    std::vector<double> s(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) {
        if (a[j] <= 0.0 || a[j] >= 1.0)
            throw std::invalid_argument("sample_relaxed_mask: scores must lie in (0,1)");
        const double u = eng.uniform01();
        const double z = (std::log(a[j]) - std::log1p(-a[j]) + std::log(u) -
                          std::log1p(-u)) / eta;
        s[j] = 1.0 / (1.0 + std::exp(-z));
    }
    return s;
}

inline std::vector<double> deterministic_mask_threshold(std::span<const double> a) {
    std::vector<double> s(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) s[j] = a[j] >= 0.5 ? 1.0 : 0.0;
    return s;
}

// Ones at the k largest scores; ties go to the lower token index.
inline std::vector<double> deterministic_mask_top_k(std::span<const double> a, int k) {
    const int l = static_cast<int>(a.size());
    if (k < 1 || k > l)
        throw std::invalid_argument("deterministic_mask_top_k: k out of range");
    std::vector<int> order(static_cast<std::size_t>(l));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&a](int i, int j) {
        return a[static_cast<std::size_t>(i)] > a[static_cast<std::size_t>(j)];
    });
    std::vector<double> s(a.size(), 0.0);
    for (int r = 0; r < k; ++r) s[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] = 1.0;
    return s;
}

// Length-normalized penalties on gates in [0,1]; values are clamped inside
// the logs. `entropy` is the single-term -sum s log s form; `entropy_full`
// adds the (1-s) term.
inline double sparsity_penalty(std::span<const double> s, const SparsityConfig& cfg) {
    cfg.validate();
    if (s.empty()) throw std::invalid_argument("sparsity_penalty: empty gates");
    const double len = static_cast<double>(s.size());
    auto cl = [](double v) {
        return std::min(std::max(v, kLogClamp), 1.0 - kLogClamp);
    };
    double acc = 0.0;
    switch (cfg.kind) {
        case SparsityKind::entropy:
            for (double v : s) acc -= v * std::log(cl(v));
            break;
        case SparsityKind::entropy_full:
            for (double v : s)
                acc -= v * std::log(cl(v)) + (1.0 - v) * std::log(cl(1.0 - v));
            break;
        case SparsityKind::kl_to_prior:
            for (double v : s)
                acc += v * std::log(cl(v) / cfg.prior) +
                       (1.0 - v) * std::log(cl(1.0 - v) / (1.0 - cfg.prior));
            break;
        case SparsityKind::l1:
            for (double v : s) acc += v;
            break;
    }
    return acc / len;
}

// ---- tape variants ----

// Gate node from the pre-sigmoid selector score z (logit of a) so the
// reparameterized sample stays numerically exact: s = sigmoid((z + g)/eta)
// with g = log u - log(1-u) drawn outside the tape.
inline ad::Var relaxed_gate_node(ad::Tape& tape, ad::Var z_logit, double gumbel,
                                 double eta) {
    if (eta <= 0.0) throw std::invalid_argument("relaxed_gate_node: eta must be > 0");
    return tape.sigmoid(tape.axpb(z_logit, 1.0 / eta, gumbel / eta));
}

inline ad::Var sparsity_penalty_node(ad::Tape& tape, ad::Var gates,
                                     const SparsityConfig& cfg) {
    cfg.validate();
    const double len = static_cast<double>(tape.val(gates).size());
    if (len == 0.0) throw std::invalid_argument("sparsity_penalty_node: empty gates");
    const auto clamped = [&tape, gates]() {
        return tape.clamp(gates, kLogClamp, 1.0 - kLogClamp);
    };
    switch (cfg.kind) {
        case SparsityKind::entropy:
            return tape.axpb(tape.dot(gates, tape.logv(clamped())), -1.0 / len, 0.0);
        case SparsityKind::entropy_full: {
            const ad::Var one_minus = tape.axpb(gates, -1.0, 1.0);
            const ad::Var h1 = tape.dot(gates, tape.logv(clamped()));
            const ad::Var h0 = tape.dot(
                one_minus, tape.logv(tape.clamp(one_minus, kLogClamp, 1.0 - kLogClamp)));
            return tape.axpb(tape.add(h1, h0), -1.0 / len, 0.0);
        }
        case SparsityKind::kl_to_prior: {
            const ad::Var one_minus = tape.axpb(gates, -1.0, 1.0);
            const ad::Var t1 = tape.dot(gates, tape.logv(clamped()));
            const ad::Var t2 = tape.axpb(tape.sum(gates), -std::log(cfg.prior), 0.0);
            const ad::Var t3 = tape.dot(
                one_minus, tape.logv(tape.clamp(one_minus, kLogClamp, 1.0 - kLogClamp)));
            const ad::Var t4 =
                tape.axpb(tape.sum(one_minus), -std::log(1.0 - cfg.prior), 0.0);
            return tape.axpb(tape.add(tape.add(t1, t2), tape.add(t3, t4)), 1.0 / len,
                             0.0);
        }
        case SparsityKind::l1:
            return tape.axpb(tape.sum(gates), 1.0 / len, 0.0);
    }
    throw std::logic_error("sparsity_penalty_node: unreachable");
}

}  // namespace catr::rationalizer
