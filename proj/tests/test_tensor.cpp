#include <doctest.h>

#include "dgrnet/conv3d.hpp"
#include "dgrnet/rng.hpp"
#include "dgrnet/tensor.hpp"
#include "test_util.hpp"

using namespace dgrnet;
using T = Tensor<double>;

TEST_SUITE_BEGIN("tensor");

static T random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(s));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return T(std::move(s), std::move(v));
}

TEST_CASE("conv3d identity kernel") {
    T in({1, 1, 1, 1}, {5.0});
    T w({1, 1, 1, 1, 1}, {1.0});
    T b({1}, {0.0});
    T out = conv3d(in, w, b, 0);
    CHECK(out.shape() == Shape{1, 1, 1, 1});
    CHECK(out.values()[0] == doctest::Approx(5.0));
}

TEST_CASE("conv3d ones kernel counts the window") {
    T in({1, 3, 3, 3}, std::vector<double>(27, 1.0));
    T w({1, 1, 3, 3, 3}, std::vector<double>(27, 1.0));
    T b({1}, {0.0});
    T out = conv3d(in, w, b, 1);
    CHECK(out.shape() == Shape{1, 3, 3, 3});
    // center voxel sees the full window
    CHECK(out.values()[13] == doctest::Approx(27.0));
    // corner voxel sees the 2x2x2 clipped window
    CHECK(out.values()[0] == doctest::Approx(8.0));
}

TEST_CASE("conv3d matches the nested-loop reference") {
    Rng rng(42);
    for (int trial = 0; trial < 12; ++trial) {
        const int Ci = 1 + int(rng.uniform_int(3));
        const int Co = 1 + int(rng.uniform_int(3));
        const int K = rng.uniform() < 0.5 ? 1 : 3;
        const int D = K + int(rng.uniform_int(5));
        const int H = K + int(rng.uniform_int(5));
        const int W = K + int(rng.uniform_int(5));
        const int pad = (trial % 2 == 0) ? (K - 1) / 2 : 0;
        const int stride = (trial % 3 == 0) ? 2 : 1;
        if ((D + 2 * pad - K) / stride + 1 <= 0) continue;
        T in = random_tensor(rng, {Ci, D, H, W});
        T w = random_tensor(rng, {Co, Ci, K, K, K});
        T b = random_tensor(rng, {Co});
        T got = conv3d(in, w, b, pad, stride);
        T want = oracle::conv3d_reference(in, w, b, pad, stride);
        REQUIRE(got.shape() == want.shape());
        double worst = 0;
        for (std::size_t i = 0; i < got.values().size(); ++i)
            worst = std::max(worst, std::abs(got.values()[i] - want.values()[i]));
        CHECK(worst < 1e-12);
    }
}

TEST_CASE("conv3d rejects mismatched channel counts") {
    T in({2, 3, 3, 3}, std::vector<double>(54, 0.0));
    T w({1, 3, 3, 3, 3}, std::vector<double>(81, 0.0));
    T b({1}, {0.0});
    CHECK_THROWS_WITH_AS(conv3d(in, w, b, 1),
                         doctest::Contains("input channels"), std::invalid_argument);
    // the diagnostic names both shapes
    try {
        conv3d(in, w, b, 1);
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        CHECK(msg.find("[1,3,3,3,3]") != std::string::npos);
        CHECK(msg.find("[2,3,3,3]") != std::string::npos);
    }
}

TEST_CASE("sigmoid values") {
    T x({3}, {0.0, 2.0, -2.0});
    T y = sigmoid(x);
    CHECK(y.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(y.values()[1] == doctest::Approx(0.8807970779778823).epsilon(1e-12));
    CHECK(y.values()[2] == doctest::Approx(1.0 - 0.8807970779778823).epsilon(1e-12));
}

TEST_CASE("mul by zeros annihilates values and gradient") {
    T x = T::param({3}, {1.0, -2.0, 3.0});
    T zeros({3}, std::vector<double>(3, 0.0));
    T y = mul(x, zeros);
    for (double v : y.values()) CHECK(v == 0.0);
    backward(sum(y));
    for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("elementwise shape mismatch is rejected with both shapes") {
    T a({2}, {1.0, 2.0});
    T b({3}, {1.0, 2.0, 3.0});
    try {
        add(a, b);
        CHECK(false);
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2]") != std::string::npos);
        CHECK(msg.find("[3]") != std::string::npos);
    }
}

TEST_CASE("log clamps non-positive input and counts clamps") {
    log_clamp_count() = 0;
    T x({3}, {0.0, -1.0, 1.0});
    T y = dgrnet::log(x);
    CHECK(log_clamp_count() == 2);
    CHECK(y.values()[0] == doctest::Approx(std::log(1e-12)));
    CHECK(y.values()[2] == doctest::Approx(0.0));
}

TEST_CASE("softmax uniform, saturated and reference values") {
    T a({3}, {0.0, 0.0, 0.0});
    const auto sa = softmax(a).values();
    for (double v : sa) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

    T b({3}, {1000.0, 0.0, 0.0});
    auto sb = softmax(b).values();
    CHECK(sb[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sb[1] == doctest::Approx(0.0));
    CHECK(std::isfinite(sb[0]));

    T c({3}, {1.0, 2.0, 3.0});
    auto sc = softmax(c).values();
    // independent route: direct exponentials
    const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
    const double z = e1 + e2 + e3;
    CHECK(sc[0] == doctest::Approx(e1 / z).epsilon(1e-13));
    CHECK(sc[1] == doctest::Approx(e2 / z).epsilon(1e-13));
    CHECK(sc[2] == doctest::Approx(e3 / z).epsilon(1e-13));
    CHECK(sc[0] == doctest::Approx(0.09003057).epsilon(1e-6));
    CHECK(sc[1] == doctest::Approx(0.24472847).epsilon(1e-6));
    CHECK(sc[2] == doctest::Approx(0.66524096).epsilon(1e-6));
    double s = sc[0] + sc[1] + sc[2];
    CHECK(std::abs(s - 1.0) < 1e-12);
}

TEST_CASE("softmax outputs sum to one on random input") {
    Rng rng(7);
    for (int t = 0; t < 100; ++t) {
        T x = random_tensor(rng, {int(1 + rng.uniform_int(8))}, -30.0, 30.0);
        auto sv = softmax(x).values();
        double s = 0;
        bool pos = true;
        for (double v : sv) {
            s += v;
            pos = pos && v > 0;
        }
        CHECK(pos);
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("backward of sum of squares") {
    T x = T::param({2}, {1.0, 2.0});
    T loss = sum(mul(x, x));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward rejects non-scalar loss") {
    T x = T::param({2}, {1.0, 2.0});
    T y = mul(x, x);
    CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("constant loss leaves grads at zero") {
    T x = T::param({2}, {1.0, 2.0});
    T c = T::scalar(3.0);
    // x does not participate
    T loss = mul(c, c);
    CHECK_FALSE(loss.tracked());
    for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("finite differences validate every primitive") {
    Rng rng(99);
    auto fd_unary = [&](auto op, double lo, double hi) {
        T x = T::param({5}, rng.normal_vec<double>(5, 0.0, 1.0));
        for (auto& v : x.values()) v = lo + (hi - lo) * rng.uniform();
        T probe = random_tensor(rng, {5});
        auto make_loss = [&]() { return sum(mul(op(x), probe)); };
        CHECK(oracle::grad_check({&x}, make_loss) < 1e-4);
    };
    fd_unary([](const T& t) { return sigmoid(t); }, -2.0, 2.0);
    fd_unary([](const T& t) { return dgrnet::exp(t); }, -1.0, 1.0);
    fd_unary([](const T& t) { return dgrnet::log(t); }, 0.5, 2.0);
    fd_unary([](const T& t) { return dgrnet::sqrt(t); }, 0.5, 2.0);
    fd_unary([](const T& t) { return relu(t); }, 0.3, 2.0);
    fd_unary([](const T& t) { return gelu(t); }, -2.0, 2.0);
    fd_unary([](const T& t) { return neg(t); }, -1.0, 1.0);
    fd_unary([](const T& t) { return softmax(t); }, -2.0, 2.0);

    SUBCASE("binary ops") {
        T a = T::param({4}, rng.normal_vec<double>(4, 0.0, 1.0));
        T b = T::param({4}, rng.normal_vec<double>(4, 1.5, 0.2));
        T probe = random_tensor(rng, {4});
        CHECK(oracle::grad_check({&a, &b}, [&]() { return sum(mul(add(a, b), probe)); }) < 1e-4);
        CHECK(oracle::grad_check({&a, &b}, [&]() { return sum(mul(mul(a, b), probe)); }) < 1e-4);
        CHECK(oracle::grad_check({&a, &b}, [&]() { return sum(mul(div(a, b), probe)); }) < 1e-4);
        CHECK(oracle::grad_check({&a, &b}, [&]() { return sum(mul(sub(a, b), probe)); }) < 1e-4);
    }

    SUBCASE("matmul and transpose") {
        T a = T::param({3, 4}, rng.normal_vec<double>(12, 0.0, 1.0));
        T b = T::param({4, 2}, rng.normal_vec<double>(8, 0.0, 1.0));
        T probe = random_tensor(rng, {3, 2});
        CHECK(oracle::grad_check({&a, &b}, [&]() { return sum(mul(matmul(a, b), probe)); }) < 1e-4);
        T probe2 = random_tensor(rng, {4, 3});
        CHECK(oracle::grad_check({&a}, [&]() { return sum(mul(transpose2d(a), probe2)); }) < 1e-4);
    }

    SUBCASE("channel ops, reductions, reshape") {
        T x = T::param({2, 3, 2, 2}, rng.normal_vec<double>(24, 0.0, 1.0));
        T s = T::param({2}, rng.normal_vec<double>(2, 0.0, 1.0));
        T probe = random_tensor(rng, {2, 3, 2, 2});
        CHECK(oracle::grad_check({&x, &s}, [&]() { return sum(mul(mul_channels(x, s), probe)); }) < 1e-4);
        CHECK(oracle::grad_check({&x, &s}, [&]() { return sum(mul(add_channels(x, s), probe)); }) < 1e-4);
        T probe_c = random_tensor(rng, {2});
        CHECK(oracle::grad_check({&x}, [&]() { return sum(mul(channel_sums(x), probe_c)); }) < 1e-4);
        T probe_r = random_tensor(rng, {3, 2, 2});
        CHECK(oracle::grad_check({&x}, [&]() { return sum(mul(mean_axis0(x), probe_r)); }) < 1e-4);
        CHECK(oracle::grad_check({&x}, [&]() { return mean(x); }) < 1e-4);
        T probe_f = random_tensor(rng, {24});
        CHECK(oracle::grad_check({&x}, [&]() { return sum(mul(reshape(x, {24}), probe_f)); }) < 1e-4);
        CHECK(oracle::grad_check({&x}, [&]() { return sum(mul(narrow(reshape(x, {24}), 5, 7), narrow(probe_f, 0, 7))); }) < 1e-4);
    }

    SUBCASE("conv3d, upsample, concat, box_sum") {
        T in = T::param({2, 3, 3, 3}, rng.normal_vec<double>(54, 0.0, 1.0));
        T w = T::param({2, 2, 3, 3, 3}, rng.normal_vec<double>(108, 0.0, 0.5));
        T b = T::param({2}, rng.normal_vec<double>(2, 0.0, 0.5));
        T probe = random_tensor(rng, {2, 3, 3, 3});
        auto conv_loss = [&]() { return sum(mul(conv3d(in, w, b, 1), probe)); };
        CHECK(oracle::grad_check({&in, &w, &b}, conv_loss) < 1e-4);

        T probe_s2 = random_tensor(rng, {2, 1, 1, 1});
        auto conv_s2 = [&]() { return sum(mul(conv3d(in, w, b, 0, 2), probe_s2)); };
        CHECK(oracle::grad_check({&in, &w, &b}, conv_s2) < 1e-4);

        T small = T::param({1, 2, 2, 2}, rng.normal_vec<double>(8, 0.0, 1.0));
        T probe_up = random_tensor(rng, {1, 4, 4, 4});
        CHECK(oracle::grad_check({&small}, [&]() { return sum(mul(upsample_nearest2(small), probe_up)); }) < 1e-4);

        T part = T::param({1, 3, 3, 3}, rng.normal_vec<double>(27, 0.0, 1.0));
        T probe_cat = random_tensor(rng, {3, 3, 3, 3});
        CHECK(oracle::grad_check({&in, &part}, [&]() {
                  return sum(mul(concat_channels<double>({in, part}), probe_cat));
              }) < 1e-4);

        T vol = T::param({3, 3, 3}, rng.normal_vec<double>(27, 0.0, 1.0));
        T probe_box = random_tensor(rng, {3, 3, 3});
        CHECK(oracle::grad_check({&vol}, [&]() { return sum(mul(box_sum3(vol, 3), probe_box)); }) < 1e-4);
    }

    SUBCASE("bce_logits") {
        T z = T::param({6}, rng.normal_vec<double>(6, 0.0, 2.0));
        T y({6}, {1.0, 0.0, 1.0, 0.0, 1.0, 1.0});
        CHECK(oracle::grad_check({&z}, [&]() { return mean(bce_logits(z, y)); }) < 1e-4);
    }
}

TEST_CASE("backward linearity") {
    Rng rng(17);
    T x = T::param({6}, rng.normal_vec<double>(6, 0.0, 1.0));
    T p1 = random_tensor(rng, {6});
    T p2 = random_tensor(rng, {6});
    auto l1 = [&]() { return sum(mul(sigmoid(x), p1)); };
    auto l2 = [&]() { return sum(mul(mul(x, x), p2)); };
    const double a = 0.7, b = -1.3;

    x.clear_grad();
    backward(l1());
    auto g1 = x.grad();
    x.clear_grad();
    backward(l2());
    auto g2 = x.grad();
    x.clear_grad();
    backward(add(mul_scalar(l1(), a), mul_scalar(l2(), b)));
    auto gc = x.grad();
    for (int i = 0; i < 6; ++i) CHECK(std::abs(gc[i] - (a * g1[i] + b * g2[i])) < 1e-10);
}

TEST_CASE("grads accumulate across sweeps and reset with clear_grad") {
    T x = T::param({2}, {1.0, 2.0});
    backward(sum(mul(x, x)));
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(4.0));
    x.clear_grad();
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("leaf filter blocks accumulation into excluded leaves") {
    T x = T::param({2}, {1.0, 2.0});
    T y = T::param({2}, {3.0, 4.0});
    T loss = sum(mul(x, y));
    std::unordered_set<const Node<double>*> allow{x.node().get()};
    backward(loss, &allow);
    CHECK(x.grad()[0] == doctest::Approx(3.0));
    CHECK(y.grad()[0] == 0.0);
    CHECK(y.grad()[1] == 0.0);
}

TEST_CASE("forward evaluation is deterministic") {
    Rng rng(5);
    T x = random_tensor(rng, {2, 4, 4, 4});
    T w = random_tensor(rng, {3, 2, 3, 3, 3});
    T b = random_tensor(rng, {3});
    T r1 = sigmoid(conv3d(x, w, b, 1));
    T r2 = sigmoid(conv3d(x, w, b, 1));
    CHECK(r1.values() == r2.values());
}

TEST_CASE("detach cuts the graph") {
    T x = T::param({2}, {1.0, 2.0});
    T y = mul(x, x).detach();
    CHECK_FALSE(y.tracked());
    T z = sum(mul(y, y));
    CHECK_FALSE(z.tracked());
}

TEST_CASE("no-grad mode records no graph") {
    T x = T::param({2}, {1.0, 2.0});
    NoGradGuard ng;
    T y = mul(x, x);
    CHECK_FALSE(y.tracked());
}

TEST_SUITE_END();
