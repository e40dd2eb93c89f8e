#pragma once
// Three-head predictor over masked sequences: shared trunk, propensity head
// and two outcome heads, gate-weighted mean pooling, supervised loss, and
// treatment/outcome residuals.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "catr/autodiff.hpp"
#include "catr/nets.hpp"

namespace catr::predictor {

inline constexpr double kPoolFloor = 1e-6;

enum class OutcomeMode { real, binary };

struct PredictorModel {
    nets::FeedforwardNet trunk;       // d -> ... -> h, identity output
    nets::FeedforwardNet head_g;      // h -> 1, sigmoid
    nets::FeedforwardNet head_q0;     // h -> 1, sigmoid when binary else identity
    nets::FeedforwardNet head_q1;
    OutcomeMode outcome = OutcomeMode::real;
};

inline PredictorModel init_predictor(int d, std::vector<int> trunk_hidden,
                                     OutcomeMode outcome, std::uint64_t seed) {
    if (trunk_hidden.empty())
        throw std::invalid_argument("init_predictor: trunk needs at least one layer");
    std::vector<int> widths{d};
    widths.insert(widths.end(), trunk_hidden.begin(), trunk_hidden.end());
    const int h = widths.back();
    PredictorModel m;
    m.outcome = outcome;
    m.trunk = nets::init_network(widths, nets::Output::identity,
                                 rng::derive(seed, 0x7472756eull));
    m.head_g = nets::init_network({h, 1}, nets::Output::sigmoid,
                                  rng::derive(seed, 0x67686561ull));
    const auto q_out = outcome == OutcomeMode::binary ? nets::Output::sigmoid
                                                      : nets::Output::identity;
    m.head_q0 = nets::init_network({h, 1}, q_out, rng::derive(seed, 0x71300000ull));
    m.head_q1 = nets::init_network({h, 1}, q_out, rng::derive(seed, 0x71310000ull));
    return m;
}

// Gate-weighted mean: sum_j s_j e_j / max(sum_j s_j, floor). All-zero gates
// pool to the zero vector.
inline std::vector<double> pool_masked(std::span<const float> seq,
                                       std::span<const double> gates, int length,
                                       int d) {
    if (static_cast<int>(gates.size()) != length)
        throw std::invalid_argument("pool_masked: gates/length mismatch");
    std::vector<double> out(static_cast<std::size_t>(d), 0.0);
    double total = 0.0;
    for (int j = 0; j < length; ++j) {
        const double s = gates[static_cast<std::size_t>(j)];
        total += s;
        const float* row = seq.data() + static_cast<std::size_t>(j) * d;
        for (int k = 0; k < d; ++k) out[static_cast<std::size_t>(k)] += s * row[k];
    }
    const double denom = std::max(total, kPoolFloor);
    for (auto& v : out) v /= denom;
    return out;
}

struct Prediction {
    double g = 0.0, q0 = 0.0, q1 = 0.0;
};

inline Prediction predict(const PredictorModel& m, std::span<const double> pooled) {
    const auto rep = nets::forward(m.trunk, pooled);
    return Prediction{nets::forward(m.head_g, rep)[0],
                      nets::forward(m.head_q0, rep)[0],
                      nets::forward(m.head_q1, rep)[0]};
}

// Per-unit supervised term: CE(t, g) plus CE or squared error on the head
// matching the observed treatment.
inline double supervised_loss_unit(const Prediction& p, int t, double y,
                                   OutcomeMode mode) {
    const double q = t == 1 ? p.q1 : p.q0;
    double outcome_term;
    if (mode == OutcomeMode::binary)
        outcome_term = -(y * std::log(q) + (1.0 - y) * std::log(1.0 - q));
    else
        outcome_term = (q - y) * (q - y);
    return nets::cross_entropy(p.g, t) + outcome_term;
}

struct ResidualPair {
    std::vector<double> rt, ry;
};

inline ResidualPair residuals(std::span<const Prediction> preds,
                              std::span<const std::uint8_t> t,
                              std::span<const float> y) {
    if (preds.size() != t.size() || preds.size() != y.size())
        throw std::invalid_argument("residuals: size mismatch");
    ResidualPair r;
    r.rt.resize(preds.size());
    r.ry.resize(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        r.rt[i] = static_cast<double>(t[i]) - preds[i].g;
        r.ry[i] = static_cast<double>(y[i]) -
                  (t[i] == 1 ? preds[i].q1 : preds[i].q0);
    }
    return r;
}

// ---- tape variants ----

struct BoundPredictor {
    nets::BoundNet trunk, head_g, head_q0, head_q1;
    OutcomeMode outcome = OutcomeMode::real;
};

inline BoundPredictor bind(ad::Tape& tape, const PredictorModel& m) {
    return BoundPredictor{nets::bind(tape, m.trunk), nets::bind(tape, m.head_g),
                          nets::bind(tape, m.head_q0), nets::bind(tape, m.head_q1),
                          m.outcome};
}

inline ad::Var pool_masked_node(ad::Tape& tape, std::span<const float> seq,
                                ad::Var gates, int length, int d) {
    const ad::Var weighted = tape.weighted_rows_sum(gates, seq, length, d);
    const ad::Var denom = tape.clamp(tape.sum(gates), kPoolFloor,
                                     std::numeric_limits<double>::infinity());
    return tape.scale_by(weighted, tape.recip(denom));
}

struct PredictionNode {
    ad::Var g, q0, q1;
};

inline PredictionNode predict_node(ad::Tape& tape, const BoundPredictor& bp,
                                   ad::Var pooled) {
    const ad::Var rep = nets::forward(tape, bp.trunk, pooled);
    return PredictionNode{nets::forward(tape, bp.head_g, rep),
                          nets::forward(tape, bp.head_q0, rep),
                          nets::forward(tape, bp.head_q1, rep)};
}

inline ad::Var supervised_loss_node(ad::Tape& tape, const PredictionNode& p, int t,
                                    double y, OutcomeMode mode) {
    const ad::Var g_term = tape.bce(p.g, {static_cast<double>(t)});
    const ad::Var q = t == 1 ? p.q1 : p.q0;
    ad::Var q_term;
    if (mode == OutcomeMode::binary) {
        q_term = tape.bce(q, {y});
    } else {
        const ad::Var diff = tape.axpb(q, 1.0, -y);
        q_term = tape.mul(diff, diff);
    }
    return tape.add(g_term, q_term);
}

}  // namespace catr::predictor
