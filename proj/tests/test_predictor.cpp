#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "catr/dataset.hpp"
#include "catr/predictor.hpp"

using namespace catr;
using predictor::OutcomeMode;

namespace {

std::vector<float> make_rows(int n_rows, int d, std::uint64_t seed) {
    rng::Engine eng(seed);
    std::vector<float> rows(static_cast<std::size_t>(n_rows) * d);
    for (auto& v : rows) v = static_cast<float>(eng.normal());
    return rows;
}

}  // namespace

TEST_CASE("pool_masked: mean, one-hot, and all-zero gates") {
    const int d = 4, L = 3;
    const auto rows = make_rows(L, d, 1);

    const std::vector<double> ones(L, 1.0);
    const auto mean_pool = predictor::pool_masked(rows, ones, L, d);
    for (int k = 0; k < d; ++k) {
        double m = 0.0;
        for (int j = 0; j < L; ++j) m += rows[static_cast<std::size_t>(j) * d + k];
        REQUIRE(mean_pool[static_cast<std::size_t>(k)] ==
                Catch::Approx(m / L).margin(1e-12));
    }

    const std::vector<double> onehot{0.0, 1.0, 0.0};
    const auto picked = predictor::pool_masked(rows, onehot, L, d);
    for (int k = 0; k < d; ++k)
        REQUIRE(picked[static_cast<std::size_t>(k)] ==
                Catch::Approx(rows[static_cast<std::size_t>(d) + k]).margin(1e-12));

    const std::vector<double> zeros(L, 0.0);
    for (double v : predictor::pool_masked(rows, zeros, L, d)) REQUIRE(v == 0.0);
}

TEST_CASE("pool_masked is invariant to permuting (token, gate) pairs jointly") {
    const int d = 5, L = 4;
    const auto rows = make_rows(L, d, 7);
    const std::vector<double> gates{0.9, 0.1, 0.6, 0.3};
    const auto base = predictor::pool_masked(rows, gates, L, d);

    const std::vector<int> perm{2, 0, 3, 1};
    std::vector<float> prows(rows.size());
    std::vector<double> pgates(gates.size());
    for (int j = 0; j < L; ++j) {
        pgates[static_cast<std::size_t>(j)] = gates[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])];
        for (int k = 0; k < d; ++k)
            prows[static_cast<std::size_t>(j) * d + k] =
                rows[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)]) * d + k];
    }
    const auto permuted = predictor::pool_masked(prows, pgates, L, d);
    for (int k = 0; k < d; ++k)
        REQUIRE(permuted[static_cast<std::size_t>(k)] ==
                Catch::Approx(base[static_cast<std::size_t>(k)]).margin(1e-12));
}

TEST_CASE("padding inertness: extending padding never changes pooled input") {
    const int d = 3, L = 2;
    auto rows = make_rows(L, d, 3);
    rows.resize(static_cast<std::size_t>(5) * d, 0.0f);  // extend padding
    const std::vector<double> gates{0.4, 0.8};
    const auto a = predictor::pool_masked(rows, gates, L, d);
    const auto b = predictor::pool_masked(
        std::span<const float>(rows.data(), static_cast<std::size_t>(2) * d), gates, L, d);
    REQUIRE(a == b);
}

TEST_CASE("predict: zero model gives g=0.5; determinism; batch equals loop") {
    const int d = 6;
    auto m = predictor::init_predictor(d, {8, 4}, OutcomeMode::real, 5);
    for (auto& w : m.trunk.weights) std::fill(w.begin(), w.end(), 0.0);
    for (auto& w : m.head_g.weights) std::fill(w.begin(), w.end(), 0.0);
    const std::vector<double> x(d, 0.3);
    REQUIRE(predictor::predict(m, x).g == 0.5);

    const auto m2 = predictor::init_predictor(d, {8, 4}, OutcomeMode::real, 6);
    const auto p1 = predictor::predict(m2, x);
    const auto p2 = predictor::predict(m2, x);
    REQUIRE(p1.g == p2.g);
    REQUIRE(p1.q0 == p2.q0);
    REQUIRE(p1.q1 == p2.q1);

    // batch-vs-loop oracle: evaluating 16 pooled inputs in sequence equals
    // evaluating each on its own
    rng::Engine eng(11);
    std::vector<std::vector<double>> xs;
    for (int i = 0; i < 16; ++i) {
        std::vector<double> v(d);
        for (auto& e : v) e = eng.normal();
        xs.push_back(v);
    }
    std::vector<predictor::Prediction> batch;
    for (const auto& v : xs) batch.push_back(predictor::predict(m2, v));
    for (int i = 15; i >= 0; --i) {
        const auto p = predictor::predict(m2, xs[static_cast<std::size_t>(i)]);
        REQUIRE(p.g == batch[static_cast<std::size_t>(i)].g);
        REQUIRE(p.q0 == batch[static_cast<std::size_t>(i)].q0);
        REQUIRE(p.q1 == batch[static_cast<std::size_t>(i)].q1);
    }
}

TEST_CASE("supervised loss: pinned symmetric value and perfect-prediction floor") {
    predictor::Prediction half{0.5, 0.5, 0.5};
    REQUIRE(predictor::supervised_loss_unit(half, 1, 1.0, OutcomeMode::binary) ==
            Catch::Approx(2.0 * std::log(2.0)).margin(1e-12));

    predictor::Prediction perfect{1.0 - 1e-6, 0.0, 1.0 - 1e-6};
    REQUIRE(predictor::supervised_loss_unit(perfect, 1, 1.0, OutcomeMode::binary) <
            2.01e-6);
}

TEST_CASE("residual arithmetic") {
    std::vector<predictor::Prediction> preds{{0.3, 0.5, 2.0}, {0.8, 0.5, 1.0}};
    const std::vector<std::uint8_t> t{1, 0};
    const std::vector<float> y{2.0f, 2.0f};
    const auto r = predictor::residuals(preds, t, y);
    REQUIRE(r.rt[0] == Catch::Approx(0.7).margin(1e-12));
    REQUIRE(r.rt[1] == Catch::Approx(-0.8).margin(1e-12));
    REQUIRE(r.ry[0] == Catch::Approx(0.0).margin(1e-12));   // y - q1
    REQUIRE(r.ry[1] == Catch::Approx(1.5).margin(1e-12));   // y - q0

    // perfect g (clamped) makes |rt| tiny
    std::vector<predictor::Prediction> sharp{{1.0 - 1e-6, 0, 0}};
    const auto r2 = predictor::residuals(
        sharp, std::vector<std::uint8_t>{1}, std::vector<float>{0.0f});
    REQUIRE(std::fabs(r2.rt[0]) <= 1e-6 + 1e-12);
}

TEST_CASE("head routing: q0 gets no gradient from an all-treated batch") {
    const int d = 4;
    auto m = predictor::init_predictor(d, {6}, OutcomeMode::real, 9);
    ad::Tape tape;
    const auto bp = predictor::bind(tape, m);
    rng::Engine eng(13);
    std::vector<ad::Var> losses;
    for (int i = 0; i < 5; ++i) {
        std::vector<double> x(d);
        for (auto& v : x) v = eng.normal();
        const auto p = predictor::predict_node(tape, bp, tape.leaf(x));
        losses.push_back(predictor::supervised_loss_node(tape, p, 1, 0.7,
                                                         OutcomeMode::real));
    }
    tape.backward(tape.sum(tape.pack(losses)));
    for (double g : tape.grad(bp.head_q0.w[0])) REQUIRE(g == 0.0);
    bool any = false;
    for (double g : tape.grad(bp.head_q1.w[0])) any = any || g != 0.0;
    REQUIRE(any);
}

TEST_CASE("pool_masked_node matches plain pooling and supervised node matches unit loss") {
    const int d = 5, L = 4;
    const auto rows = make_rows(L, d, 21);
    const std::vector<double> gates{0.2, 0.9, 0.5, 0.7};
    const auto m = predictor::init_predictor(d, {8, 4}, OutcomeMode::real, 23);

    ad::Tape tape;
    const auto bp = predictor::bind(tape, m);
    const auto g = tape.leaf(gates);
    const auto pooled = predictor::pool_masked_node(tape, rows, g, L, d);
    const auto plain = predictor::pool_masked(rows, gates, L, d);
    for (int k = 0; k < d; ++k)
        REQUIRE(tape.val(pooled)[static_cast<std::size_t>(k)] ==
                Catch::Approx(plain[static_cast<std::size_t>(k)]).margin(1e-14));

    const auto pn = predictor::predict_node(tape, bp, pooled);
    const auto pl = predictor::predict(m, plain);
    REQUIRE(tape.scalar(pn.g) == Catch::Approx(pl.g).margin(1e-14));
    REQUIRE(tape.scalar(pn.q0) == Catch::Approx(pl.q0).margin(1e-14));
    REQUIRE(tape.scalar(pn.q1) == Catch::Approx(pl.q1).margin(1e-14));

    const auto ln = predictor::supervised_loss_node(tape, pn, 0, 1.3,
                                                    OutcomeMode::real);
    REQUIRE(tape.scalar(ln) ==
            Catch::Approx(predictor::supervised_loss_unit(pl, 0, 1.3,
                                                          OutcomeMode::real))
                .margin(1e-14));
}
