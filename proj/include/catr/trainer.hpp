#pragma once
// Minibatched joint training of selector and predictor: per batch, score
// tokens, sample relaxed gates, pool, predict, form residuals, and descend
// on   mean supervised + mu * mean sparsity + gamma * HSIC(batch residuals).
// Early stopping tracks the total objective on the validation split with
// deterministic soft gates; the best-epoch parameters are restored.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "catr/dataset.hpp"
#include "catr/estimators.hpp"
#include "catr/kernels.hpp"
#include "catr/predictor.hpp"
#include "catr/rationalizer.hpp"

namespace catr::trainer {

struct TrainConfig {
    double mu = 0.1;     // sparsity weight
    double gamma = 1.0;  // HSIC weight
    double eta = 0.5;    // relaxed-Bernoulli temperature
    int batch_size = 128;
    int max_epochs = 60;
    int patience = 10;
    double learning_rate = 1e-3;
    std::array<int, 3> split_ratio{25, 6, 6};
    std::uint64_t seed = 0;
    rationalizer::SparsityConfig sparsity;  // weight field unused; mu governs
    predictor::OutcomeMode outcome = predictor::OutcomeMode::real;
    kernels::KernelConfig kernel;
    std::vector<int> selector_hidden{64};
    std::vector<int> trunk_hidden{200, 100};
    int min_hsic_batch = 32;  // smaller trailing batches are folded forward

    void validate() const {
        if (mu < 0.0 || gamma < 0.0)
            throw std::invalid_argument("TrainConfig: mu and gamma must be >= 0");
        if (eta <= 0.0) throw std::invalid_argument("TrainConfig: eta must be > 0");
        if (batch_size < 2) throw std::invalid_argument("TrainConfig: batch_size < 2");
        if (max_epochs < 0 || patience < 1)
            throw std::invalid_argument("TrainConfig: bad epochs/patience");
        if (learning_rate <= 0.0)
            throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
        for (int r : split_ratio)
            if (r <= 0) throw std::invalid_argument("TrainConfig: split ratios must be > 0");
        sparsity.validate();
        kernel.validate();
    }
};

struct EpochStats {
    double l_sup = 0.0;
    double l_sparse = 0.0;
    double l_hsic = 0.0;
    double total = 0.0;
    double val_total = 0.0;
};

struct Split {
    std::vector<int> train, val, test;
};

struct TrainedModel {
    nets::FeedforwardNet selector;
    predictor::PredictorModel pred;
    predictor::OutcomeMode outcome = predictor::OutcomeMode::real;
    std::vector<EpochStats> history;
    int best_epoch = -1;  // 0-based; -1 when no epoch ran
    Split split;
};

// Deterministic shuffled split by normalized ratio, remainder to test.
inline Split make_split(int n, const std::array<int, 3>& ratio, std::uint64_t seed) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    rng::Engine eng(rng::derive(seed, 0x73706c69ull));
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(eng.uniform_below(static_cast<std::uint64_t>(i + 1)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    const double total = ratio[0] + ratio[1] + ratio[2];
    const int n_train = static_cast<int>(std::floor(n * ratio[0] / total));
    const int n_val = static_cast<int>(std::floor(n * ratio[1] / total));
    if (n_train < 1 || n_val < 1 || n - n_train - n_val < 1)
        throw std::invalid_argument("make_split: some split is empty for n=" +
                                    std::to_string(n));
    Split s;
    s.train.assign(idx.begin(), idx.begin() + n_train);
    s.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
    s.test.assign(idx.begin() + n_train + n_val, idx.end());
    return s;
}

enum class EvalMaskMode { threshold, top_k, soft };

namespace detail {

struct UnitGraph {
    ad::Var sup;      // supervised term
    ad::Var sparse;   // sparsity penalty (invalid when mu == 0)
    ad::Var rt, ry;   // residual scalars
};

// Build one unit's forward graph. Gates come from the pre-sigmoid selector
// score plus logistic noise so logit(a) is exact; `gumbel` may be empty for
// deterministic soft gates (s = a).
inline UnitGraph unit_graph(ad::Tape& tape, const dataset::TokenSequenceDataset& ds,
                            int i, const nets::BoundNet& selector,
                            const predictor::BoundPredictor& pred,
                            const TrainConfig& cfg,
                            const std::vector<double>& gumbel) {
    const int d = ds.d;
    const int len = static_cast<int>(ds.lengths[static_cast<std::size_t>(i)]);
    const auto seq = ds.sequence_span(i);
    const auto ctx = rationalizer::mean_embedding(seq, len, d);

    std::vector<ad::Var> gate_parts;
    gate_parts.reserve(static_cast<std::size_t>(len));
    std::vector<double> input(static_cast<std::size_t>(2 * d));
    std::copy(ctx.begin(), ctx.end(), input.begin() + d);
    for (int j = 0; j < len; ++j) {
        const float* row = seq.data() + static_cast<std::size_t>(j) * d;
        for (int k = 0; k < d; ++k) input[static_cast<std::size_t>(k)] = row[k];
        const ad::Var z = nets::forward_logit(tape, selector, tape.leaf(input));
        if (gumbel.empty())
            gate_parts.push_back(tape.sigmoid(z));
        else
            gate_parts.push_back(rationalizer::relaxed_gate_node(
                tape, z, gumbel[static_cast<std::size_t>(j)], cfg.eta));
    }
    const ad::Var gates = tape.pack(gate_parts);
    const ad::Var pooled = predictor::pool_masked_node(tape, seq, gates, len, d);
    const auto p = predictor::predict_node(tape, pred, pooled);

    UnitGraph ug;
    const int t = ds.treatment[static_cast<std::size_t>(i)];
    const double y = ds.outcome[static_cast<std::size_t>(i)];
    ug.sup = predictor::supervised_loss_node(tape, p, t, y, cfg.outcome);
    if (cfg.mu > 0.0)
        ug.sparse = rationalizer::sparsity_penalty_node(tape, gates, cfg.sparsity);
    ug.rt = tape.axpb(p.g, -1.0, static_cast<double>(t));
    ug.ry = tape.axpb(t == 1 ? p.q1 : p.q0, -1.0, y);
    return ug;
}

struct BatchLoss {
    ad::Var total;
    double sup = 0.0, sparse = 0.0, hsic = 0.0;
};

// Assemble the batch objective. When `frozen_sigma` is set it overrides the
// per-batch median heuristic (used by gradient verification).
inline BatchLoss batch_loss(ad::Tape& tape, const dataset::TokenSequenceDataset& ds,
                            const std::vector<int>& batch,
                            const nets::BoundNet& selector,
                            const predictor::BoundPredictor& pred,
                            const TrainConfig& cfg, bool sample_gates,
                            std::uint64_t gate_seed,
                            std::optional<double> frozen_sigma = std::nullopt) {
    const int m = static_cast<int>(batch.size());
    std::vector<ad::Var> sups, sparses, rts, rys;
    sups.reserve(batch.size());
    for (int bi = 0; bi < m; ++bi) {
        const int i = batch[static_cast<std::size_t>(bi)];
        std::vector<double> gumbel;
        if (sample_gates) {
            rng::Engine eng(rng::derive(gate_seed, static_cast<std::uint64_t>(i),
                                        0x67617465ull));
            const int len = static_cast<int>(ds.lengths[static_cast<std::size_t>(i)]);
            gumbel.resize(static_cast<std::size_t>(len));
            for (auto& g : gumbel) {
                const double u = eng.uniform01();
                g = std::log(u) - std::log1p(-u);
            }
        }
        auto ug = unit_graph(tape, ds, i, selector, pred, cfg, gumbel);
        sups.push_back(ug.sup);
        if (cfg.mu > 0.0) sparses.push_back(ug.sparse);
        rts.push_back(ug.rt);
        rys.push_back(ug.ry);
    }

    BatchLoss out;
    ad::Var total = tape.axpb(tape.sum(tape.pack(sups)), 1.0 / m, 0.0);
    out.sup = tape.scalar(total);
    if (cfg.mu > 0.0) {
        const ad::Var sp = tape.axpb(tape.sum(tape.pack(sparses)), 1.0 / m, 0.0);
        out.sparse = tape.scalar(sp);
        total = tape.add(total, tape.axpb(sp, cfg.mu, 0.0));
    }
    if (cfg.gamma > 0.0 && m >= 2) {
        const ad::Var rt = tape.pack(rts);
        const ad::Var ry = tape.pack(rys);
        kernels::KernelConfig kc = cfg.kernel;
        if (frozen_sigma) {
            kc.bandwidth_mode = kernels::BandwidthMode::fixed;
            kc.fixed_sigma = *frozen_sigma;
        }
        const ad::Var h = kernels::hsic_residual_node(tape, rt, ry, kc);
        out.hsic = tape.scalar(h);
        total = tape.add(total, tape.axpb(h, cfg.gamma, 0.0));
    }
    out.total = total;
    return out;
}

inline std::vector<std::vector<double>> snapshot(const nets::FeedforwardNet& sel,
                                                 const predictor::PredictorModel& pm) {
    std::vector<std::vector<double>> s;
    auto grab = [&s](const nets::FeedforwardNet& n) {
        for (const auto& w : n.weights) s.push_back(w);
        for (const auto& b : n.biases) s.push_back(b);
    };
    grab(sel);
    grab(pm.trunk);
    grab(pm.head_g);
    grab(pm.head_q0);
    grab(pm.head_q1);
    return s;
}

inline void restore(nets::FeedforwardNet& sel, predictor::PredictorModel& pm,
                    const std::vector<std::vector<double>>& snap) {
    std::size_t k = 0;
    auto put = [&snap, &k](nets::FeedforwardNet& n) {
        for (auto& w : n.weights) w = snap[k++];
        for (auto& b : n.biases) b = snap[k++];
    };
    put(sel);
    put(pm.trunk);
    put(pm.head_g);
    put(pm.head_q0);
    put(pm.head_q1);
}

}  // namespace detail

// Deterministic per-unit evaluation with the configured mask rule.
inline estimators::NuisanceEstimates evaluate_nuisances(
    const nets::FeedforwardNet& selector, const predictor::PredictorModel& pm,
    const dataset::TokenSequenceDataset& ds,
    EvalMaskMode mode = EvalMaskMode::threshold, int top_k = 1) {
    estimators::NuisanceEstimates out;
    out.g_hat.resize(static_cast<std::size_t>(ds.n));
    out.q0_hat.resize(static_cast<std::size_t>(ds.n));
    out.q1_hat.resize(static_cast<std::size_t>(ds.n));
    for (int i = 0; i < ds.n; ++i) {
        const int len = static_cast<int>(ds.lengths[static_cast<std::size_t>(i)]);
        const auto seq = ds.sequence_span(i);
        const auto a = rationalizer::score_tokens(selector, seq, len, ds.d);
        std::vector<double> gates;
        switch (mode) {
            case EvalMaskMode::threshold:
                gates = rationalizer::deterministic_mask_threshold(a);
                break;
            case EvalMaskMode::top_k:
                gates = rationalizer::deterministic_mask_top_k(
                    a, std::min(top_k, len));
                break;
            case EvalMaskMode::soft:
                gates = a;
                break;
        }
        const auto pooled = predictor::pool_masked(seq, gates, len, ds.d);
        const auto p = predictor::predict(pm, pooled);
        out.g_hat[static_cast<std::size_t>(i)] = p.g;
        out.q0_hat[static_cast<std::size_t>(i)] = p.q0;
        out.q1_hat[static_cast<std::size_t>(i)] = p.q1;
    }
    return out;
}

inline TrainedModel train(const dataset::TokenSequenceDataset& ds,
                          const TrainConfig& cfg) {
    cfg.validate();
    dataset::validate(ds);
    if (ds.n < 3) throw std::invalid_argument("train: dataset too small to split");

    TrainedModel model;
    model.outcome = cfg.outcome;
    model.split = make_split(ds.n, cfg.split_ratio, cfg.seed);
    model.selector = [&] {
        std::vector<int> widths{2 * ds.d};
        widths.insert(widths.end(), cfg.selector_hidden.begin(),
                      cfg.selector_hidden.end());
        widths.push_back(1);
        auto net = nets::init_network(widths, nets::Output::sigmoid,
                                      rng::derive(cfg.seed, 0x73656cull));
        // keep-then-prune: gates start near 0.73 so sparsification removes
        // tokens through the responsive sigmoid band instead of having to
        // resurrect saturated ones
        net.biases.back()[0] = 1.0;
        return net;
    }();
    model.pred = predictor::init_predictor(ds.d, cfg.trunk_hidden, cfg.outcome,
                                           rng::derive(cfg.seed, 0x707264ull));
    if (cfg.max_epochs == 0) return model;

    {
        bool has0 = false, has1 = false;
        for (int i : model.split.train)
            (ds.treatment[static_cast<std::size_t>(i)] == 1 ? has1 : has0) = true;
        if (!has0 || !has1)
            throw std::runtime_error(
                "train: training split contains a single treatment arm; supply more "
                "data or a different seed");
    }

    nets::AdamState adam;
    adam.cfg.lr = cfg.learning_rate;

    auto validation_total = [&]() {
        ad::Tape tape;
        const auto sel = nets::bind(tape, model.selector);
        const auto prd = predictor::bind(tape, model.pred);
        const auto bl = detail::batch_loss(tape, ds, model.split.val, sel, prd, cfg,
                                           /*sample_gates=*/false, 0);
        return tape.scalar(bl.total);
    };

    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best_params;
    int since_best = 0;

    std::vector<int> order = model.split.train;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        rng::Engine shuffle_eng(rng::derive(cfg.seed, static_cast<std::uint64_t>(epoch),
                                            0x73687566ull));
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
            const int j = static_cast<int>(
                shuffle_eng.uniform_below(static_cast<std::uint64_t>(i + 1)));
            std::swap(order[static_cast<std::size_t>(i)],
                      order[static_cast<std::size_t>(j)]);
        }
        // batch boundaries; with the HSIC term on, batches stay at or above
        // min_hsic_batch (trailing stub merges back) for a stable Gram
        const int n_train = static_cast<int>(order.size());
        int batch_size = cfg.batch_size;
        if (cfg.gamma > 0.0)
            batch_size = std::max(batch_size, std::min(cfg.min_hsic_batch, n_train));
        std::vector<std::pair<int, int>> ranges;
        for (int lo = 0; lo < n_train; lo += batch_size)
            ranges.emplace_back(lo, std::min(lo + batch_size, n_train));
        if (ranges.size() > 1 &&
            ranges.back().second - ranges.back().first < cfg.min_hsic_batch) {
            ranges[ranges.size() - 2].second = ranges.back().second;
            ranges.pop_back();
        }

        EpochStats stats;
        double weight_sum = 0.0;
        for (std::size_t bidx = 0; bidx < ranges.size(); ++bidx) {
            const auto [lo, hi] = ranges[bidx];
            std::vector<int> batch(order.begin() + lo, order.begin() + hi);
            ad::Tape tape;
            const auto sel = nets::bind(tape, model.selector);
            const auto prd = predictor::bind(tape, model.pred);
            const std::uint64_t gate_seed =
                rng::derive(cfg.seed, static_cast<std::uint64_t>(epoch), 0x65706full);
            const auto bl = detail::batch_loss(tape, ds, batch, sel, prd, cfg,
                                               /*sample_gates=*/true, gate_seed);
            const double total = tape.scalar(bl.total);
            if (!std::isfinite(total))
                throw std::runtime_error("train: non-finite loss at epoch " +
                                         std::to_string(epoch) + ", batch " +
                                         std::to_string(bidx));
            tape.backward(bl.total);

            auto views = nets::param_views("selector", model.selector, tape, sel);
            auto append = [&views](std::vector<nets::ParamView> more) {
                views.insert(views.end(), more.begin(), more.end());
            };
            append(nets::param_views("trunk", model.pred.trunk, tape, prd.trunk));
            append(nets::param_views("head_g", model.pred.head_g, tape, prd.head_g));
            append(nets::param_views("head_q0", model.pred.head_q0, tape, prd.head_q0));
            append(nets::param_views("head_q1", model.pred.head_q1, tape, prd.head_q1));
            nets::adam_step(views, adam);

            const double w = static_cast<double>(batch.size());
            stats.l_sup += w * bl.sup;
            stats.l_sparse += w * bl.sparse;
            stats.l_hsic += w * bl.hsic;
            stats.total += w * total;
            weight_sum += w;
        }
        stats.l_sup /= weight_sum;
        stats.l_sparse /= weight_sum;
        stats.l_hsic /= weight_sum;
        stats.total /= weight_sum;
        stats.val_total = validation_total();
        model.history.push_back(stats);

        if (stats.val_total < best_val) {
            best_val = stats.val_total;
            model.best_epoch = epoch;
            best_params = detail::snapshot(model.selector, model.pred);
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    if (!best_params.empty())
        detail::restore(model.selector, model.pred, best_params);
    return model;
}

// Mean per-occurrence selection score per token type; returns the top k by
// score with lexicographic tie-breaking.
inline std::vector<std::pair<std::string, double>> token_importance(
    const nets::FeedforwardNet& selector, const dataset::TokenSequenceDataset& ds,
    int k) {
    if (!ds.tokens)
        throw std::invalid_argument("token_importance: dataset carries no token strings");
    if (k < 1) throw std::invalid_argument("token_importance: k must be >= 1");
    std::map<std::string, std::pair<double, std::size_t>> acc;  // sum, count
    for (int i = 0; i < ds.n; ++i) {
        const int len = static_cast<int>(ds.lengths[static_cast<std::size_t>(i)]);
        const auto a =
            rationalizer::score_tokens(selector, ds.sequence_span(i), len, ds.d);
        const auto& toks = (*ds.tokens)[static_cast<std::size_t>(i)];
        for (int j = 0; j < len; ++j) {
            auto& slot = acc[toks[static_cast<std::size_t>(j)]];
            slot.first += a[static_cast<std::size_t>(j)];
            slot.second += 1;
        }
    }
    std::vector<std::pair<std::string, double>> scored;
    scored.reserve(acc.size());
    for (const auto& [tok, sc] : acc)
        scored.emplace_back(tok, sc.first / static_cast<double>(sc.second));
    std::stable_sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
        if (x.second != y.second) return x.second > y.second;
        return x.first < y.first;
    });
    if (static_cast<int>(scored.size()) > k) scored.resize(static_cast<std::size_t>(k));
    return scored;
}

inline void write_history_csv(const TrainedModel& model,
                              const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("write_history_csv: cannot open " + path.string());
    out << "epoch,l_sup,l_sparse,hsic,total,val_total\n";
    char buf[256];
    for (std::size_t e = 0; e < model.history.size(); ++e) {
        const auto& h = model.history[e];
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", e,
                      h.l_sup, h.l_sparse, h.l_hsic, h.total, h.val_total);
        out << buf;
    }
}

}  // namespace catr::trainer
