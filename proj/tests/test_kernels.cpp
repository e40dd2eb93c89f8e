#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "catr/autodiff.hpp"
#include "catr/kernels.hpp"
#include "catr/rng.hpp"

using namespace catr;
using kernels::Gram;

namespace {

// Independent oracle: materialize H = I - (1/n) 1 1^T, form HKH and HLH by
// explicit matrix products, and take the double sum over elementwise
// products. Deliberately O(n^3); used only to pin values.
double hsic_oracle(const Gram& k, const Gram& l) {
    const int n = k.n;
    std::vector<double> h(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            h[static_cast<std::size_t>(i) * n + j] = (i == j ? 1.0 : 0.0) - 1.0 / n;
    auto matmul = [n](const std::vector<double>& a, const std::vector<double>& b) {
        std::vector<double> c(static_cast<std::size_t>(n) * n, 0.0);
        for (int i = 0; i < n; ++i)
            for (int m = 0; m < n; ++m) {
                const double av = a[static_cast<std::size_t>(i) * n + m];
                for (int j = 0; j < n; ++j)
                    c[static_cast<std::size_t>(i) * n + j] +=
                        av * b[static_cast<std::size_t>(m) * n + j];
            }
        return c;
    };
    const auto kc = matmul(matmul(h, k.a), h);
    const auto lc = matmul(matmul(h, l.a), h);
    double s = 0.0;
    for (std::size_t i = 0; i < kc.size(); ++i) s += kc[i] * lc[i];
    return s / (static_cast<double>(n - 1) * (n - 1));
}

std::vector<double> random_vec(int n, rng::Engine& eng) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = eng.normal();
    return v;
}

}  // namespace

TEST_CASE("gram_linear matches direct products") {
    const std::vector<double> u{1.0, 2.0};
    const auto k = kernels::gram_linear(u);
    REQUIRE(k(0, 0) == 1.0);
    REQUIRE(k(0, 1) == 2.0);
    REQUIRE(k(1, 0) == 2.0);
    REQUIRE(k(1, 1) == 4.0);

    const std::vector<double> z{0.0, 0.0, 0.0};
    const auto kz = kernels::gram_linear(z);
    for (double v : kz.a) REQUIRE(v == 0.0);

    rng::Engine eng(5);
    const auto r = random_vec(32, eng);
    const auto kr = kernels::gram_linear(r);
    for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j)
            REQUIRE(kr(i, j) == Catch::Approx(r[static_cast<std::size_t>(i)] *
                                              r[static_cast<std::size_t>(j)])
                                    .margin(1e-12));
    REQUIRE_THROWS_AS(kernels::gram_linear(std::vector<double>{1.0}),
                      std::invalid_argument);
}

TEST_CASE("gram_rbf has unit diagonal and the pinned off-diagonal value") {
    const double sigma = 0.7;
    const std::vector<double> u{0.0, sigma * std::sqrt(2.0)};
    const auto l = kernels::gram_rbf(u, sigma);
    REQUIRE(l(0, 0) == 1.0);
    REQUIRE(l(1, 1) == 1.0);
    REQUIRE(l(0, 1) == Catch::Approx(std::exp(-1.0)).epsilon(1e-12));

    const auto big = kernels::gram_rbf(std::vector<double>{-1.0, 0.5, 2.0}, 1e9);
    for (double v : big.a) REQUIRE(v == Catch::Approx(1.0).margin(1e-6));

    REQUIRE_THROWS_AS(kernels::gram_rbf(u, 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(kernels::gram_rbf(u, -1.0), std::invalid_argument);
}

TEST_CASE("median_heuristic enumerated by hand") {
    // pairwise squared distances of (0,1,3): {1, 9, 4}; median 4; sigma 2
    REQUIRE(kernels::median_heuristic(std::vector<double>{0.0, 1.0, 3.0}, 1e-3) ==
            Catch::Approx(2.0).margin(1e-12));
    // all equal -> floor
    REQUIRE(kernels::median_heuristic(std::vector<double>{5.0, 5.0, 5.0}, 1e-3) ==
            1e-3);
    // single pair
    REQUIRE(kernels::median_heuristic(std::vector<double>{0.0, 2.0}, 1e-3) ==
            Catch::Approx(2.0).margin(1e-12));
}

TEST_CASE("hsic_empirical: centering kills constants") {
    const std::vector<double> u{1.0, -2.0, 0.5, 3.0};
    Gram constant{4, std::vector<double>(16, 2.5)};
    const auto k = kernels::gram_linear(u);
    REQUIRE(std::fabs(kernels::hsic_empirical(k, constant)) < 1e-12);
}

TEST_CASE("hsic_empirical: hand case u=v=(1,2,3) equals 1 exactly") {
    const std::vector<double> u{1.0, 2.0, 3.0};
    const auto k = kernels::gram_linear(u);
    REQUIRE(kernels::hsic_empirical(k, k) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("hsic_empirical agrees with the expanded double-sum oracle") {
    rng::Engine eng(17);
    for (int rep = 0; rep < 25; ++rep) {
        const int n = 8 + static_cast<int>(eng.uniform_below(57));
        const auto u = random_vec(n, eng);
        const auto v = random_vec(n, eng);
        const auto k = kernels::gram_linear(u);
        const auto l = rep % 2 == 0 ? kernels::gram_rbf(v, 0.5 + eng.uniform01())
                                    : kernels::gram_linear(v);
        const double fast = kernels::hsic_empirical(k, l);
        const double slow = hsic_oracle(k, l);
        REQUIRE(fast == Catch::Approx(slow).margin(1e-10));
        REQUIRE(fast >= -1e-12);
        // symmetry in the arguments
        REQUIRE(kernels::hsic_empirical(l, k) == Catch::Approx(fast).margin(1e-12));
    }
}

TEST_CASE("hsic_empirical rejects dimension mismatch") {
    const auto k = kernels::gram_linear(std::vector<double>{1.0, 2.0});
    const auto l = kernels::gram_linear(std::vector<double>{1.0, 2.0, 3.0});
    REQUIRE_THROWS_AS(kernels::hsic_empirical(k, l), std::invalid_argument);
}

TEST_CASE("linear-kernel HSIC is shift invariant after centering") {
    rng::Engine eng(23);
    const auto u = random_vec(24, eng);
    const auto v = random_vec(24, eng);
    auto shifted = u;
    for (auto& x : shifted) x += 17.5;
    const auto l = kernels::gram_rbf(v, 1.0);
    const double base = kernels::hsic_empirical(kernels::gram_linear(u), l);
    const double moved = kernels::hsic_empirical(kernels::gram_linear(shifted), l);
    REQUIRE(moved == Catch::Approx(base).margin(1e-10));
}

TEST_CASE("hsic_residual composes the pieces") {
    kernels::KernelConfig cfg;

    SECTION("all-zero outcome residuals give zero") {
        const std::vector<double> rt{0.3, -0.2, 0.5, -0.6};
        const std::vector<double> ry(4, 0.0);
        REQUIRE(std::fabs(kernels::hsic_residual(rt, ry, cfg)) < 1e-12);
    }

    SECTION("standardized 1..8 matches the double-sum oracle") {
        std::vector<double> r(8);
        for (int i = 0; i < 8; ++i) r[static_cast<std::size_t>(i)] = i + 1.0;
        const double m = 4.5;
        double ss = 0.0;
        for (double v : r) ss += (v - m) * (v - m);
        const double sd = std::sqrt(ss / 7.0);
        for (auto& v : r) v = (v - m) / sd;
        const double got = kernels::hsic_residual(r, r, cfg);
        const double sigma = kernels::median_heuristic(r, cfg.bandwidth_floor);
        const double want =
            hsic_oracle(kernels::gram_linear(r), kernels::gram_rbf(r, sigma));
        REQUIRE(got == Catch::Approx(want).margin(1e-10));
    }

    SECTION("joint permutation leaves the statistic unchanged") {
        rng::Engine eng(31);
        const auto rt = random_vec(16, eng);
        const auto ry = random_vec(16, eng);
        const double base = kernels::hsic_residual(rt, ry, cfg);
        std::vector<int> perm{5, 3, 11, 0, 15, 8, 2, 7, 1, 14, 9, 4, 6, 13, 10, 12};
        std::vector<double> pt(16), py(16);
        for (int i = 0; i < 16; ++i) {
            pt[static_cast<std::size_t>(i)] = rt[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
            py[static_cast<std::size_t>(i)] = ry[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        }
        REQUIRE(kernels::hsic_residual(pt, py, cfg) ==
                Catch::Approx(base).margin(1e-12));
    }
}

TEST_CASE("independent samples stay below 5x the permutation-null quantile") {
    // n = 2000 draws of independent residual pairs; the permutation oracle
    // exploits that centering commutes with joint permutation, so HSIC under
    // a permuted pairing is sum_ij K~[i][j] L~[perm(i)][perm(j)].
    const int n = 2000;
    rng::Engine eng(101);
    std::vector<double> u(n), v(n);
    for (auto& x : u) x = eng.normal();
    for (auto& x : v) x = eng.normal();
    kernels::KernelConfig cfg;
    const double stat = kernels::hsic_residual(u, v, cfg);

    const double sigma = kernels::median_heuristic(v, cfg.bandwidth_floor);
    auto centered = [n](Gram g) {
        std::vector<double> row(static_cast<std::size_t>(n), 0.0);
        double grand = 0.0;
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += g(i, j);
            row[static_cast<std::size_t>(i)] = s / n;
            grand += s;
        }
        grand /= static_cast<double>(n) * n;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                g(i, j) += grand - row[static_cast<std::size_t>(i)] -
                           row[static_cast<std::size_t>(j)];
        return g;
    };
    const Gram kc = centered(kernels::gram_linear(u));
    const Gram lc = centered(kernels::gram_rbf(v, sigma));

    std::vector<int> perm(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    std::vector<double> null_stats;
    rng::Engine perm_eng(202);
    for (int rep = 0; rep < 200; ++rep) {
        for (int i = n - 1; i > 0; --i) {
            const int j = static_cast<int>(perm_eng.uniform_below(
                static_cast<std::uint64_t>(i + 1)));
            std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
        }
        double s = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                s += kc(i, j) * lc(perm[static_cast<std::size_t>(i)],
                                   perm[static_cast<std::size_t>(j)]);
        null_stats.push_back(s / (static_cast<double>(n - 1) * (n - 1)));
    }
    std::sort(null_stats.begin(), null_stats.end());
    const double q95 = null_stats[189];  // 95th percentile of 200
    REQUIRE(stat < 5.0 * q95);
}

TEST_CASE("hsic node gradient matches central differences with sigma held fixed") {
    rng::Engine eng(57);
    for (int rep = 0; rep < 4; ++rep) {
        const int n = 8 + 8 * rep;
        auto rt0 = random_vec(n, eng);
        auto ry0 = random_vec(n, eng);
        kernels::KernelConfig cfg;
        const double sigma = kernels::median_heuristic(ry0, cfg.bandwidth_floor);
        const bool rbf = rep % 2 == 0;

        ad::Tape tape;
        const auto rt = tape.leaf(rt0);
        const auto ry = tape.leaf(ry0);
        const auto h = tape.hsic(rt, ry, rbf, sigma);
        tape.backward(h);
        const auto grt = tape.grad(rt);
        const auto gry = tape.grad(ry);

        auto value = [&](const std::vector<double>& a, const std::vector<double>& b) {
            ad::Tape t2;
            return t2.scalar(t2.hsic(t2.leaf(a), t2.leaf(b), rbf, sigma));
        };
        const double step = 1e-4;
        for (int i = 0; i < n; ++i) {
            auto up = ry0, dn = ry0;
            up[static_cast<std::size_t>(i)] += step;
            dn[static_cast<std::size_t>(i)] -= step;
            const double fd = (value(rt0, up) - value(rt0, dn)) / (2.0 * step);
            const double denom = std::max({std::fabs(fd), std::fabs(gry[static_cast<std::size_t>(i)]), 1e-6});
            REQUIRE(std::fabs(fd - gry[static_cast<std::size_t>(i)]) / denom < 1e-4);
        }
        for (int i = 0; i < n; ++i) {
            auto up = rt0, dn = rt0;
            up[static_cast<std::size_t>(i)] += step;
            dn[static_cast<std::size_t>(i)] -= step;
            const double fd = (value(up, ry0) - value(dn, ry0)) / (2.0 * step);
            const double denom = std::max({std::fabs(fd), std::fabs(grt[static_cast<std::size_t>(i)]), 1e-6});
            REQUIRE(std::fabs(fd - grt[static_cast<std::size_t>(i)]) / denom < 1e-4);
        }
    }
}
