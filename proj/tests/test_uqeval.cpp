#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dgrnet/rng.hpp"
#include "dgrnet/uqeval.hpp"

using namespace dgrnet;

TEST_SUITE_BEGIN("uqeval");

namespace {

// Test-side brute-force hd95: full distance matrix, full sort, same
// linear-interpolation percentile.
std::optional<double> hd95_oracle(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b,
                                  std::array<int, 3> dims) {
    const int D = dims[0], H = dims[1], W = dims[2];
    auto surf = [&](const std::vector<std::uint8_t>& m) {
        std::vector<std::array<int, 3>> s;
        auto at = [&](int z, int y, int x) {
            if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W) return false;
            return m[(std::size_t(z) * H + y) * W + x] != 0;
        };
        for (int z = 0; z < D; ++z)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    if (at(z, y, x) && (!at(z - 1, y, x) || !at(z + 1, y, x) || !at(z, y - 1, x) ||
                                        !at(z, y + 1, x) || !at(z, y, x - 1) || !at(z, y, x + 1)))
                        s.push_back({z, y, x});
        return s;
    };
    auto sa = surf(a), sb = surf(b);
    if (sa.empty() || sb.empty()) return std::nullopt;
    std::vector<double> pool;
    auto side = [&](const auto& from, const auto& to) {
        for (const auto& p : from) {
            double best = 1e300;
            for (const auto& q : to) {
                const double dz = p[0] - q[0], dy = p[1] - q[1], dx = p[2] - q[2];
                best = std::min(best, dz * dz + dy * dy + dx * dx);
            }
            pool.push_back(std::sqrt(best));
        }
    };
    side(sa, sb);
    side(sb, sa);
    std::sort(pool.begin(), pool.end());
    const double pos = 0.95 * double(pool.size() - 1);
    const std::size_t lo = std::size_t(pos);
    if (lo + 1 >= pool.size()) return pool.back();
    return pool[lo] + (pool[lo + 1] - pool[lo]) * (pos - lo);
}

// Exhaustive Mann-Whitney pair counting, ties worth 0.5.
std::optional<double> auc_oracle(const std::vector<double>& u, const std::vector<std::uint8_t>& err) {
    double wins = 0, ties = 0;
    std::size_t npos = 0, nneg = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        if (!err[i]) continue;
        ++npos;
        for (std::size_t j = 0; j < u.size(); ++j) {
            if (err[j]) continue;
            if (u[i] > u[j]) wins += 1;
            else if (u[i] == u[j]) ties += 1;
        }
    }
    nneg = u.size() - npos;
    if (npos == 0 || nneg == 0) return std::nullopt;
    return (wins + 0.5 * ties) / (double(npos) * double(nneg));
}

std::vector<std::uint8_t> cube_mask(std::array<int, 3> dims, int z0, int y0, int x0, int side) {
    std::vector<std::uint8_t> m(std::size_t(dims[0]) * dims[1] * dims[2], 0);
    for (int z = z0; z < z0 + side; ++z)
        for (int y = y0; y < y0 + side; ++y)
            for (int x = x0; x < x0 + side; ++x) m[(std::size_t(z) * dims[1] + y) * dims[2] + x] = 1;
    return m;
}

}  // namespace

TEST_CASE("dice counting and conventions") {
    std::vector<std::uint8_t> p{1, 1, 0, 0, 0, 0};
    std::vector<std::uint8_t> g{1, 1, 1, 1, 0, 0};
    CHECK(uq::dice(p, g) == doctest::Approx(2.0 * 2 / 6).epsilon(1e-12));
    CHECK(uq::dice(g, g) == 1.0);
    std::vector<std::uint8_t> e(6, 0);
    CHECK(uq::dice(e, e) == 1.0);  // both empty
    // symmetry
    CHECK(uq::dice(p, g) == uq::dice(g, p));
}

TEST_CASE("hd95 on cubes and degenerate masks") {
    std::array<int, 3> dims{8, 8, 8};
    auto a = cube_mask(dims, 2, 2, 2, 3);
    auto b = cube_mask(dims, 3, 2, 2, 3);  // shifted by one voxel along z
    CHECK(uq::hd95(a, a, dims).value() == 0.0);
    CHECK(uq::hd95(a, b, dims).value() == doctest::Approx(1.0));
    std::vector<std::uint8_t> empty(a.size(), 0);
    CHECK_FALSE(uq::hd95(empty, a, dims).has_value());
    CHECK_FALSE(uq::hd95(a, empty, dims).has_value());
}

TEST_CASE("hd95 matches the brute-force oracle on random masks") {
    Rng rng(311);
    std::array<int, 3> dims{7, 6, 8};
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::uint8_t> a(std::size_t(dims[0]) * dims[1] * dims[2]);
        std::vector<std::uint8_t> b(a.size());
        for (auto& v : a) v = rng.uniform() < 0.3;
        for (auto& v : b) v = rng.uniform() < 0.3;
        auto got = uq::hd95(a, b, dims);
        auto want = hd95_oracle(a, b, dims);
        REQUIRE(got.has_value() == want.has_value());
        if (got) CHECK(*got == *want);
    }
}

TEST_CASE("hd95 symmetry and translation invariance") {
    std::array<int, 3> dims{10, 10, 10};
    auto a = cube_mask(dims, 1, 2, 1, 3);
    auto b = cube_mask(dims, 3, 4, 5, 2);
    CHECK(uq::hd95(a, b, dims).value() == uq::hd95(b, a, dims).value());
    auto a2 = cube_mask(dims, 2, 3, 2, 3);
    auto b2 = cube_mask(dims, 4, 5, 6, 2);
    CHECK(uq::hd95(a, b, dims).value() == uq::hd95(a2, b2, dims).value());
}

TEST_CASE("uncertainty ratio") {
    std::vector<std::uint8_t> err{1, 1, 0, 0};
    std::vector<double> u_const(4, 0.3);
    CHECK(uq::uncertainty_ratio(u_const, err).value() == doctest::Approx(1.0));
    std::vector<double> u_toy{0.8, 0.6, 0.1, 0.1};
    CHECK(uq::uncertainty_ratio(u_toy, err).value() == doctest::Approx(7.0));
    std::vector<double> u_perfect{1.0, 1.0, 0.0, 0.0};
    CHECK(uq::uncertainty_ratio(u_perfect, err).value() == 1e6);  // capped
    std::vector<std::uint8_t> no_err(4, 0);
    CHECK_FALSE(uq::uncertainty_ratio(u_toy, no_err).has_value());
}

TEST_CASE("error detection AUC") {
    std::vector<std::uint8_t> err{1, 1, 0, 0, 0};
    std::vector<double> sep{0.9, 0.8, 0.1, 0.2, 0.3};
    CHECK(uq::error_auc(sep, err).value() == 1.0);
    std::vector<double> cst(5, 0.4);
    CHECK(uq::error_auc(cst, err).value() == 0.5);
    std::vector<std::uint8_t> all(5, 1);
    CHECK_FALSE(uq::error_auc(sep, all).has_value());

    // 6-voxel toy with a tie, against exhaustive pair counting
    std::vector<double> u{0.6, 0.2, 0.6, 0.1, 0.9, 0.2};
    std::vector<std::uint8_t> e{1, 0, 0, 0, 1, 1};
    CHECK(uq::error_auc(u, e).value() == auc_oracle(u, e).value());
}

TEST_CASE("error AUC equals pair counting on random inputs and survives monotone transforms") {
    Rng rng(77);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t n = 5 + rng.uniform_int(60);
        std::vector<double> u(n);
        std::vector<std::uint8_t> e(n);
        for (auto& v : u) v = std::round(rng.uniform() * 8) / 8.0;  // force ties
        for (auto& v : e) v = rng.uniform() < 0.4;
        auto got = uq::error_auc(u, e);
        auto want = auc_oracle(u, e);
        REQUIRE(got.has_value() == want.has_value());
        if (!got) continue;
        CHECK(*got == *want);
        // strictly monotone transform leaves the AUC unchanged
        std::vector<double> ut(n);
        for (std::size_t i = 0; i < n; ++i) ut[i] = std::exp(3.0 * u[i]) + 1.0;
        CHECK(uq::error_auc(ut, e).value() == *got);
    }
}

TEST_CASE("sparsification curves and AUSE") {
    SUBCASE("uncertainty identical to the true error gives AUSE 0") {
        Rng rng(13);
        std::vector<double> err(50);
        for (auto& v : err) v = rng.uniform();  // ties-free with probability 1
        auto s = uq::sparsification(err, err);
        CHECK(s.ause == doctest::Approx(0.0));
        // monotone transform of the error as uncertainty also gives 0
        std::vector<double> u(err.size());
        for (std::size_t i = 0; i < u.size(); ++i) u[i] = std::tanh(2.0 * err[i]);
        CHECK(uq::sparsification(u, err).ause == doctest::Approx(0.0));
    }
    SUBCASE("constant uncertainty against the closed-form index-order curve") {
        Rng rng(14);
        const std::size_t n = 64;
        std::vector<double> err(n);
        for (auto& v : err) v = rng.uniform();
        std::vector<double> u(n, 0.5);
        auto s = uq::sparsification(u, err);
        // independent route: removal in index order; oracle removes the
        // largest errors first
        std::vector<double> sorted_err = err;
        std::sort(sorted_err.begin(), sorted_err.end(), std::greater<>());
        double expect_ause = 0;
        for (int f = 0; f < 100; ++f) {
            const std::size_t k = (std::size_t(f) * n) / 100;
            double model = std::accumulate(err.begin() + k, err.end(), 0.0) / double(n - k);
            double oracle = std::accumulate(sorted_err.begin() + k, sorted_err.end(), 0.0) / double(n - k);
            CHECK(s.model_curve[f] == doctest::Approx(model).epsilon(1e-12));
            CHECK(s.oracle_curve[f] == doctest::Approx(oracle).epsilon(1e-12));
            expect_ause += model - oracle;
        }
        CHECK(s.ause == doctest::Approx(expect_ause / 100.0).epsilon(1e-12));
    }
    SUBCASE("oracle curve is non-increasing and AUSE is non-negative") {
        Rng rng(15);
        for (int trial = 0; trial < 10; ++trial) {
            const std::size_t n = 10 + rng.uniform_int(100);
            std::vector<double> err(n), u(n);
            for (auto& v : err) v = rng.uniform();
            for (auto& v : u) v = rng.uniform();
            auto s = uq::sparsification(u, err);
            CHECK(s.ause >= -1e-15);
            for (int f = 1; f < 100; ++f) CHECK(s.oracle_curve[f] <= s.oracle_curve[f - 1] + 1e-12);
        }
    }
}

TEST_CASE("error mask is the union of per-class mismatches") {
    // 2 classes, 3 voxels
    std::vector<double> probs{0.9, 0.2, 0.6, 0.1, 0.8, 0.4};
    std::vector<std::uint8_t> gt{1, 0, 0, 0, 0, 0};
    auto em = uq::error_mask(probs, gt, 2);
    CHECK(em == std::vector<std::uint8_t>{0, 1, 1});
    auto be = uq::brier_error(probs, gt, 2);
    CHECK(be[0] == doctest::Approx(0.5 * (0.01 + 0.01)));
    CHECK(be[1] == doctest::Approx(0.5 * (0.04 + 0.64)));
}

TEST_SUITE_END();
