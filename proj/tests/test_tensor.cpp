#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "sled/errors.hpp"
#include "sled/random.hpp"
#include "sled/tensor.hpp"

using namespace sled;

namespace {

std::vector<double> randn(Rng& rng, std::int64_t n, double scl = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.next_normal() * scl;
    return v;
}

// max over coordinates of |analytic - numeric| / max(1, |analytic|)
double max_rel_grad_err(Tensor& leaf, const std::function<double()>& forward) {
    double worst = 0.0;
    auto& data = leaf.data();
    const auto& g = leaf.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double num = oracle::numeric_grad(&data[i], forward);
        const double rel = std::fabs(g[i] - num) / std::max(1.0, std::fabs(g[i]));
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace

TEST_CASE("tensor basics") {
    auto t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.rank() == 2);
    CHECK(t.dim(1) == 3);
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
    CHECK(all_finite(t));
    t.data()[3] = std::nan("");
    CHECK(!all_finite(t));
    CHECK(Tensor::scalar(4.25).item() == 4.25);
    CHECK_THROWS_AS(t.item(), ParamError);
}

TEST_CASE("reshape keeps data, rejects bad sizes") {
    auto t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    auto r = reshape(t, {3, 2});
    CHECK(r.data() == t.data());
    CHECK_THROWS_AS(reshape(t, {4, 2}), ShapeError);
}

// ---- conv ------------------------------------------------------------------

TEST_CASE("conv: 1x1 identity kernel reproduces the input") {
    Rng rng(11);
    auto x = Tensor::from_data({1, 1, 4, 5}, randn(rng, 20));
    auto w = Tensor::from_data({1, 1, 1, 1}, {1.0});
    auto y = conv(x, w, Tensor(), 1, 0, 1);
    CHECK(y.shape() == x.shape());
    for (std::size_t i = 0; i < 20; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("conv: all-ones 3x3 on all-ones 3x3 input counts the window overlap") {
    auto x = Tensor::full({1, 1, 3, 3}, 1.0);
    auto w = Tensor::full({1, 1, 3, 3}, 1.0);
    auto y = conv(x, w, Tensor(), 1, 1, 1);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    CHECK(y.data()[4] == doctest::Approx(9.0));  // center
    for (std::size_t corner : {0u, 2u, 6u, 8u}) CHECK(y.data()[corner] == doctest::Approx(4.0));
    for (std::size_t edge : {1u, 3u, 5u, 7u}) CHECK(y.data()[edge] == doctest::Approx(6.0));
}

TEST_CASE("conv: random 3-d strided dilated case matches the loop reference") {
    Rng rng(42);
    const std::int64_t N = 2, Ci = 3, Z = 4, Y = 5, X = 5, Co = 4, K = 3;
    auto xv = randn(rng, N * Ci * Z * Y * X);
    auto wv = randn(rng, Co * Ci * K * K * K);
    auto bv = randn(rng, Co);
    auto x = Tensor::from_data({N, Ci, Z, Y, X}, xv);
    auto w = Tensor::from_data({Co, Ci, K, K, K}, wv);
    auto b = Tensor::from_data({Co}, bv);
    auto y = conv(x, w, b, 2, 2, 2);
    std::int64_t oz, oy, ox;
    auto ref = oracle::conv3d(xv, N, Ci, Z, Y, X, wv, Co, K, K, K, bv.data(), 2, 2, 2, 2, oz, oy, ox);
    REQUIRE(y.shape() == Shape{N, Co, oz, oy, ox});
    for (std::size_t i = 0; i < ref.size(); ++i)
        CHECK(std::fabs(y.data()[i] - ref[i]) < 1e-10);
}

TEST_CASE("conv: random 2-d cases match the loop reference") {
    Rng rng(43);
    for (int stride : {1, 2}) {
        for (int pad : {0, 1}) {
            const std::int64_t N = 2, Ci = 3, Y = 7, X = 6, Co = 2, K = 3;
            auto xv = randn(rng, N * Ci * Y * X);
            auto wv = randn(rng, Co * Ci * K * K);
            auto x = Tensor::from_data({N, Ci, Y, X}, xv);
            auto w = Tensor::from_data({Co, Ci, K, K}, wv);
            auto y = conv(x, w, Tensor(), stride, pad, 1);
            std::int64_t oz, oy, ox;
            auto ref = oracle::conv3d(xv, N, Ci, 1, Y, X, wv, Co, 1, K, K, nullptr, stride, 0, pad, 1,
                                      oz, oy, ox);
            REQUIRE(y.shape() == Shape{N, Co, oy, ox});
            for (std::size_t i = 0; i < ref.size(); ++i)
                CHECK(std::fabs(y.data()[i] - ref[i]) < 1e-10);
        }
    }
}

TEST_CASE("conv: shape and parameter errors") {
    auto x = Tensor::zeros({1, 3, 4, 4});
    CHECK_THROWS_AS(conv(x, Tensor::zeros({2, 2, 3, 3}), Tensor(), 1, 1, 1), ShapeError);
    CHECK_THROWS_AS(conv(x, Tensor::zeros({2, 3, 7, 7}), Tensor(), 1, 0, 1), ShapeError);
    CHECK_THROWS_AS(conv(x, Tensor::zeros({2, 3, 3, 3}), Tensor::zeros({3}), 1, 1, 1), ShapeError);
    CHECK_THROWS_AS(conv(x, Tensor::zeros({2, 3, 3, 3}), Tensor(), 0, 1, 1), ParamError);
    CHECK_THROWS_AS(conv(x, Tensor::zeros({2, 3, 3, 3}), Tensor(), 1, -1, 1), ParamError);
    CHECK_THROWS_AS(conv(x, Tensor::zeros({2, 3, 3, 3}), Tensor(), 1, 1, 0), ParamError);
    CHECK_THROWS_AS(conv(Tensor::zeros({3, 4, 4}), Tensor::zeros({2, 3, 3, 3}), Tensor(), 1, 1, 1),
                    ShapeError);
}

// ---- avg_pool ---------------------------------------------------------------

TEST_CASE("avg_pool: constant input stays constant") {
    auto x = Tensor::full({1, 2, 4, 4, 4}, 7.0);
    auto y = avg_pool(x, 2, 2);
    CHECK(y.shape() == Shape{1, 2, 2, 2, 2});
    for (double v : y.data()) CHECK(v == doctest::Approx(7.0));
}

TEST_CASE("avg_pool: 1-d view window 2 stride 2") {
    auto x = Tensor::from_data({1, 1, 4}, {1, 2, 3, 4});
    auto y = avg_pool(x, 2, 2);
    CHECK(y.shape() == Shape{1, 1, 2});
    CHECK(y.data()[0] == doctest::Approx(1.5));
    CHECK(y.data()[1] == doctest::Approx(3.5));
}

TEST_CASE("avg_pool: random 3-d case matches the loop reference") {
    Rng rng(7);
    auto xv = randn(rng, 1 * 2 * 8 * 8 * 8);
    auto x = Tensor::from_data({1, 2, 8, 8, 8}, xv);
    auto y = avg_pool(x, 2, 2);
    std::int64_t oz, oy, ox;
    auto ref = oracle::avg_pool3d(xv, 2, 8, 8, 8, 2, 2, 2, 2, 2, 2, oz, oy, ox);
    REQUIRE(y.shape() == Shape{1, 2, oz, oy, ox});
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::fabs(y.data()[i] - ref[i]) < 1e-12);
}

TEST_CASE("avg_pool: rejects oversized and non-covering windows") {
    CHECK_THROWS_AS(avg_pool(Tensor::zeros({1, 1, 3, 3}), 4, 1), ShapeError);
    CHECK_THROWS_AS(avg_pool(Tensor::zeros({1, 1, 5, 5}), 2, 2), ShapeError);
}

// ---- trilinear_upsample --------------------------------------------------------

TEST_CASE("trilinear_upsample: scale 1 is the identity") {
    Rng rng(3);
    auto xv = randn(rng, 1 * 2 * 2 * 3 * 4);
    auto x = Tensor::from_data({1, 2, 2, 3, 4}, xv);
    auto y = trilinear_upsample(x, 1);
    CHECK(y.shape() == x.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) CHECK(y.data()[i] == doctest::Approx(xv[i]));
}

TEST_CASE("trilinear_upsample: constants stay constant") {
    auto x = Tensor::full({1, 1, 2, 2, 2}, 3.25);
    auto y = trilinear_upsample(x, 3);
    CHECK(y.shape() == Shape{1, 1, 6, 6, 6});
    for (double v : y.data()) CHECK(v == doctest::Approx(3.25));
}

TEST_CASE("trilinear_upsample: reproduces a tri-affine ramp exactly") {
    // f(d,h,w) = d + 2h + 3w on a 2x2x2 grid, upsampled x2 (corner-aligned).
    std::vector<double> xv(8);
    for (int d = 0; d < 2; ++d)
        for (int h = 0; h < 2; ++h)
            for (int w = 0; w < 2; ++w) xv[(d * 2 + h) * 2 + w] = d + 2.0 * h + 3.0 * w;
    auto x = Tensor::from_data({1, 1, 2, 2, 2}, xv);
    auto y = trilinear_upsample(x, 2);
    REQUIRE(y.shape() == Shape{1, 1, 4, 4, 4});
    for (int d = 0; d < 4; ++d)
        for (int h = 0; h < 4; ++h)
            for (int w = 0; w < 4; ++w) {
                const double pd = d / 3.0, ph = h / 3.0, pw = w / 3.0;
                const double want = pd + 2.0 * ph + 3.0 * pw;
                CHECK(std::fabs(y.data()[(d * 4 + h) * 4 + w] - want) < 1e-12);
            }
}

TEST_CASE("trilinear_upsample: random case matches the loop reference") {
    Rng rng(9);
    auto xv = randn(rng, 2 * 3 * 2 * 3 * 4);
    auto x = Tensor::from_data({2, 3, 2, 3, 4}, xv);
    auto y = trilinear_upsample(x, 2);
    auto ref = oracle::trilinear3d(xv, 6, 2, 3, 4, 2);
    REQUIRE(static_cast<std::int64_t>(ref.size()) == y.numel());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::fabs(y.data()[i] - ref[i]) < 1e-10);
}

// ---- batchnorm ------------------------------------------------------------------

TEST_CASE("batchnorm: constant input passes beta through") {
    auto x = Tensor::full({2, 3, 4}, 2.0);
    auto gamma = Tensor::full({3}, 1.0);
    auto beta = Tensor::full({3}, 5.0);
    auto rm = Tensor::zeros({3});
    auto rv = Tensor::full({3}, 1.0);
    auto y = batchnorm(x, gamma, beta, rm, rv, true);
    for (double v : y.data()) CHECK(v == doctest::Approx(5.0));
}

TEST_CASE("batchnorm: two-value channel normalizes to +-1") {
    auto x = Tensor::from_data({2, 1, 1}, {-1.0, 1.0});
    auto gamma = Tensor::full({1}, 1.0);
    auto beta = Tensor::zeros({1});
    auto rm = Tensor::zeros({1});
    auto rv = Tensor::full({1}, 1.0);
    auto y = batchnorm(x, gamma, beta, rm, rv, true, 1e-12);
    CHECK(y.data()[0] == doctest::Approx(-1.0).epsilon(1e-5));
    CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("batchnorm: normalizes random channels to zero mean unit variance") {
    Rng rng(5);
    const std::int64_t N = 4, C = 3, S = 50;
    auto x = Tensor::from_data({N, C, S}, randn(rng, N * C * S, 2.5));
    auto gamma = Tensor::full({C}, 1.0);
    auto beta = Tensor::zeros({C});
    auto rm = Tensor::zeros({C});
    auto rv = Tensor::full({C}, 1.0);
    const double eps = 1e-10;
    auto y = batchnorm(x, gamma, beta, rm, rv, true, eps);
    for (std::int64_t c = 0; c < C; ++c) {
        double mean = 0.0, var = 0.0;
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t s = 0; s < S; ++s) mean += y.data()[(n * C + c) * S + s];
        mean /= static_cast<double>(N * S);
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t s = 0; s < S; ++s) {
                const double d = y.data()[(n * C + c) * S + s] - mean;
                var += d * d;
            }
        var /= static_cast<double>(N * S);
        CHECK(std::fabs(mean) < 1e-8);
        CHECK(std::fabs(var - 1.0) < 1e-6);
    }
}

TEST_CASE("batchnorm: running statistics blend with momentum and drive eval mode") {
    auto x = Tensor::from_data({1, 1, 4}, {1.0, 2.0, 3.0, 4.0});
    auto gamma = Tensor::full({1}, 1.0);
    auto beta = Tensor::zeros({1});
    auto rm = Tensor::zeros({1});
    auto rv = Tensor::full({1}, 1.0);
    batchnorm(x, gamma, beta, rm, rv, true, 1e-5, 0.1);
    // batch mean 2.5, biased variance 1.25
    CHECK(rm.data()[0] == doctest::Approx(0.25));
    CHECK(rv.data()[0] == doctest::Approx(0.9 + 0.125));
    auto y = batchnorm(x, gamma, beta, rm, rv, false, 1e-5);
    const double is = 1.0 / std::sqrt(rv.data()[0] + 1e-5);
    CHECK(y.data()[0] == doctest::Approx((1.0 - 0.25) * is));
    CHECK(y.data()[3] == doctest::Approx((4.0 - 0.25) * is));
    // eval mode must not touch the buffers
    CHECK(rm.data()[0] == doctest::Approx(0.25));
}

TEST_CASE("batchnorm: parameter errors") {
    auto x = Tensor::zeros({1, 2, 4});
    auto g1 = Tensor::full({2}, 1.0), b1 = Tensor::zeros({2});
    auto rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);
    CHECK_THROWS_AS(batchnorm(x, g1, b1, rm, rv, true, 0.0), ParamError);
    CHECK_THROWS_AS(batchnorm(x, Tensor::full({3}, 1.0), b1, rm, rv, true), ShapeError);
}

// ---- softmax ----------------------------------------------------------------------

TEST_CASE("softmax_axis: uniform logits give uniform probabilities") {
    auto x = Tensor::full({4}, 2.5);
    auto y = softmax_axis(x, 0);
    for (double v : y.data()) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("softmax_axis: extreme logits stay finite") {
    auto x = Tensor::from_data({2}, {1000.0, 0.0});
    auto y = softmax_axis(x, 0);
    CHECK(y.data()[0] == doctest::Approx(1.0));
    CHECK(y.data()[1] == doctest::Approx(0.0));
    CHECK(all_finite(y));
}

TEST_CASE("softmax_axis: matches the direct formula and sums to one") {
    Rng rng(17);
    auto xv = randn(rng, 2 * 5 * 3, 3.0);
    auto x = Tensor::from_data({2, 5, 3}, xv);
    auto y = softmax_axis(x, 1);
    auto ref = oracle::softmax(xv, 2, 5, 3);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::fabs(y.data()[i] - ref[i]) < 1e-12);
    for (std::int64_t o = 0; o < 2; ++o)
        for (std::int64_t i = 0; i < 3; ++i) {
            double s = 0.0;
            for (std::int64_t k = 0; k < 5; ++k) {
                const double p = y.data()[(o * 5 + k) * 3 + i];
                CHECK(p >= 0.0);
                CHECK(p <= 1.0);
                s += p;
            }
            CHECK(std::fabs(s - 1.0) < 1e-12);
        }
    CHECK_THROWS_AS(softmax_axis(x, 3), ParamError);
}

// ---- smooth_l1 -----------------------------------------------------------------------

TEST_CASE("smooth_l1: zero residual, piecewise values, empty mask") {
    auto p = Tensor::from_data({2}, {1.0, 2.0});
    auto m = Tensor::full({2}, 1.0);
    CHECK(smooth_l1(p, p, m).item() == doctest::Approx(0.0));

    auto one = Tensor::from_data({1}, {0.5});
    auto zero = Tensor::zeros({1});
    auto m1 = Tensor::full({1}, 1.0);
    CHECK(smooth_l1(one, zero, m1).item() == doctest::Approx(0.125));
    CHECK(smooth_l1(Tensor::from_data({1}, {2.0}), zero, m1).item() == doctest::Approx(1.5));

    CHECK_THROWS_AS(smooth_l1(p, p, Tensor::zeros({2})), EvalError);
    CHECK_THROWS_AS(smooth_l1(p, p, Tensor::full({2}, 0.5)), ParamError);
    CHECK_THROWS_AS(smooth_l1(p, Tensor::zeros({3}), m), ShapeError);
}

TEST_CASE("smooth_l1: random masked case matches the formula") {
    Rng rng(23);
    const std::int64_t n = 40;
    auto pv = randn(rng, n, 2.0);
    auto tv = randn(rng, n, 2.0);
    std::vector<double> mv(n);
    for (auto& v : mv) v = rng.next_double() < 0.6 ? 1.0 : 0.0;
    mv[0] = 1.0;
    auto out = smooth_l1(Tensor::from_data({n}, pv), Tensor::from_data({n}, tv),
                         Tensor::from_data({n}, mv));
    CHECK(std::fabs(out.item() - oracle::smooth_l1(pv, tv, mv)) < 1e-12);
}

// ---- index_expectation ------------------------------------------------------------------

TEST_CASE("index_expectation: hand case and random case") {
    auto p = Tensor::from_data({4}, {0.0, 0.5, 0.25, 0.25});
    CHECK(index_expectation(p, 0).item() == doctest::Approx(0.5 + 0.5 + 0.75));

    Rng rng(31);
    auto xv = randn(rng, 2 * 6 * 4);
    auto x = Tensor::from_data({2, 6, 4}, xv);
    auto probs = softmax_axis(x, 1);
    auto e = index_expectation(probs, 1);
    CHECK(e.shape() == Shape{2, 4});
    auto ref = oracle::index_expectation(probs.data(), 2, 6, 4);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::fabs(e.data()[i] - ref[i]) < 1e-12);
}

// ---- backward: closed-form cases ----------------------------------------------------------

TEST_CASE("backward: sum gives all-ones gradient") {
    auto x = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("backward: elementwise square") {
    auto x = Tensor::from_data({2}, {1.0, -2.0}, true);
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(-4.0));
}

TEST_CASE("backward: rejects non-scalar loss") {
    auto x = Tensor::from_data({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(add(x, x)), ParamError);
}

TEST_CASE("backward: running the same tape twice doubles every gradient") {
    Rng rng(13);
    auto x = Tensor::from_data({1, 2, 5, 5}, randn(rng, 50), true);
    auto w = Tensor::from_data({2, 2, 3, 3}, randn(rng, 36), true);
    auto loss = sum(relu(conv(x, w, Tensor(), 1, 1, 1)));
    backward(loss);
    auto gx = x.grad();
    auto gw = w.grad();
    backward(loss);
    for (std::size_t i = 0; i < gx.size(); ++i) CHECK(x.grad()[i] == 2.0 * gx[i]);
    for (std::size_t i = 0; i < gw.size(); ++i) CHECK(w.grad()[i] == 2.0 * gw[i]);
}

TEST_CASE("backward: diamond-shaped reuse accumulates both paths") {
    auto x = Tensor::scalar(3.0, true);
    backward(sum(add(mul(x, x), x)));  // d/dx (x^2 + x) = 2x + 1
    CHECK(x.grad()[0] == doctest::Approx(7.0));
}

// ---- gradient checks against central differences ------------------------------------------

TEST_CASE("gradcheck: conv (input, weight, bias)") {
    Rng rng(101);
    auto x = Tensor::from_data({2, 2, 4, 5}, randn(rng, 80), true);
    auto w = Tensor::from_data({3, 2, 3, 3}, randn(rng, 54), true);
    auto b = Tensor::from_data({3}, randn(rng, 3), true);
    const auto wsum = randn(rng, 2 * 3 * 2 * 3);

    auto loss_of = [&]() {
        auto y = conv(x, w, b, 2, 1, 1);
        auto wt = Tensor::from_data(y.shape(), wsum);
        return sum(mul(y, wt));
    };
    backward(loss_of());
    auto forward = [&]() { return loss_of().item(); };
    CHECK(max_rel_grad_err(x, forward) < 1e-4);
    CHECK(max_rel_grad_err(w, forward) < 1e-4);
    CHECK(max_rel_grad_err(b, forward) < 1e-4);
}

TEST_CASE("gradcheck: conv 3-d with dilation") {
    Rng rng(103);
    auto x = Tensor::from_data({1, 2, 5, 5, 5}, randn(rng, 250), true);
    auto w = Tensor::from_data({2, 2, 3, 3, 3}, randn(rng, 108), true);
    const auto wsum = randn(rng, 1 * 2 * 5 * 5 * 5);
    auto loss_of = [&]() {
        auto y = conv(x, w, Tensor(), 1, 2, 2);
        auto wt = Tensor::from_data(y.shape(), wsum);
        return sum(mul(y, wt));
    };
    backward(loss_of());
    auto forward = [&]() { return loss_of().item(); };
    CHECK(max_rel_grad_err(x, forward) < 1e-4);
    CHECK(max_rel_grad_err(w, forward) < 1e-4);
}

TEST_CASE("gradcheck: avg_pool") {
    Rng rng(105);
    auto x = Tensor::from_data({1, 2, 4, 4, 4}, randn(rng, 128), true);
    const auto wsum = randn(rng, 1 * 2 * 2 * 2 * 2);
    auto loss_of = [&]() {
        auto y = avg_pool(x, 2, 2);
        return sum(mul(y, Tensor::from_data(y.shape(), wsum)));
    };
    backward(loss_of());
    auto forward = [&]() { return loss_of().item(); };
    CHECK(max_rel_grad_err(x, forward) < 1e-4);
}

TEST_CASE("gradcheck: trilinear_upsample") {
    Rng rng(107);
    auto x = Tensor::from_data({1, 2, 2, 3, 3}, randn(rng, 36), true);
    const auto wsum = randn(rng, 1 * 2 * 4 * 6 * 6);
    auto loss_of = [&]() {
        auto y = trilinear_upsample(x, 2);
        return sum(mul(y, Tensor::from_data(y.shape(), wsum)));
    };
    backward(loss_of());
    auto forward = [&]() { return loss_of().item(); };
    CHECK(max_rel_grad_err(x, forward) < 1e-4);
}

TEST_CASE("gradcheck: batchnorm train and eval modes") {
    Rng rng(109);
    auto x = Tensor::from_data({3, 2, 6}, randn(rng, 36, 1.5), true);
    auto gamma = Tensor::from_data({2}, {1.2, 0.7}, true);
    auto beta = Tensor::from_data({2}, {0.1, -0.3}, true);
    const auto wsum = randn(rng, 36);

    for (bool training : {true, false}) {
        CAPTURE(training);
        x.zero_grad();
        gamma.zero_grad();
        beta.zero_grad();
        auto loss_of = [&]() {
            // fresh buffers each call so the forward pass has no side-state
            auto rm = Tensor::from_data({2}, {0.1, -0.2});
            auto rv = Tensor::from_data({2}, {1.3, 0.8});
            auto y = batchnorm(x, gamma, beta, rm, rv, training);
            return sum(mul(y, Tensor::from_data(y.shape(), wsum)));
        };
        backward(loss_of());
        auto forward = [&]() { return loss_of().item(); };
        CHECK(max_rel_grad_err(x, forward) < 1e-4);
        CHECK(max_rel_grad_err(gamma, forward) < 1e-4);
        CHECK(max_rel_grad_err(beta, forward) < 1e-4);
    }
}

TEST_CASE("gradcheck: softmax_axis and index_expectation") {
    Rng rng(111);
    auto x = Tensor::from_data({2, 5, 3}, randn(rng, 30), true);
    const auto wsum = randn(rng, 2 * 3);
    auto loss_of = [&]() {
        auto e = index_expectation(softmax_axis(x, 1), 1);
        return sum(mul(e, Tensor::from_data(e.shape(), wsum)));
    };
    backward(loss_of());
    auto forward = [&]() { return loss_of().item(); };
    CHECK(max_rel_grad_err(x, forward) < 1e-4);
}

TEST_CASE("gradcheck: smooth_l1 away from the kink") {
    Rng rng(113);
    const std::int64_t n = 24;
    std::vector<double> pv(n), tv(n), mv(n);
    for (std::int64_t i = 0; i < n; ++i) {
        // residuals well inside or outside |x| = 1 so finite differences stay valid
        const double r = rng.next_double() < 0.5 ? 0.4 * rng.next_double() : 1.5 + rng.next_double();
        tv[i] = rng.next_normal();
        pv[i] = tv[i] + (rng.next_double() < 0.5 ? r : -r);
        mv[i] = rng.next_double() < 0.7 ? 1.0 : 0.0;
    }
    mv[0] = 1.0;
    auto p = Tensor::from_data({n}, pv, true);
    auto t = Tensor::from_data({n}, tv, true);
    auto m = Tensor::from_data({n}, mv);
    auto loss_of = [&]() { return smooth_l1(p, t, m); };
    backward(loss_of());
    auto forward = [&]() { return loss_of().item(); };
    CHECK(max_rel_grad_err(p, forward) < 1e-4);
    CHECK(max_rel_grad_err(t, forward) < 1e-4);
}

TEST_CASE("gradcheck: elementwise chain with relu") {
    Rng rng(115);
    std::vector<double> xv = randn(rng, 20);
    for (auto& v : xv)
        if (std::fabs(v) < 0.1) v += v < 0 ? -0.2 : 0.2;  // keep clear of the relu kink
    auto x = Tensor::from_data({4, 5}, xv, true);
    auto y = Tensor::from_data({4, 5}, randn(rng, 20), true);
    auto loss_of = [&]() { return sum(relu(add(mul(x, y), scale(sub(x, y), 0.5)))); };
    backward(loss_of());
    auto forward = [&]() { return loss_of().item(); };
    CHECK(max_rel_grad_err(x, forward) < 1e-4);
    CHECK(max_rel_grad_err(y, forward) < 1e-4);
}

// ---- custom_op ------------------------------------------------------------------------------

TEST_CASE("custom_op: forward value and pull hook participate in backward") {
    auto a = Tensor::from_data({2}, {1.0, 2.0}, true);
    auto b = Tensor::from_data({2}, {3.0, 4.0});  // no grad
    std::vector<double> out = {a.data()[0] * b.data()[0], a.data()[1] * b.data()[1]};
    auto y = custom_op({2}, out, {a, b},
                       [b](const std::vector<double>& adj, const std::vector<std::vector<double>*>& gins) {
                           REQUIRE(gins.size() == 2);
                           CHECK(gins[1] == nullptr);
                           if (gins[0])
                               for (std::size_t i = 0; i < adj.size(); ++i)
                                   (*gins[0])[i] += adj[i] * b.data()[i];
                       });
    backward(sum(y));
    CHECK(a.grad()[0] == doctest::Approx(3.0));
    CHECK(a.grad()[1] == doctest::Approx(4.0));
}

// ---- structure trace -------------------------------------------------------------------------

TEST_CASE("trace: records op kinds, strides and dilations while enabled") {
    trace::set_enabled(true);
    trace::clear();
    Rng rng(19);
    auto x = Tensor::from_data({1, 1, 6, 6}, randn(rng, 36));
    auto w = Tensor::from_data({1, 1, 3, 3}, randn(rng, 9));
    auto y = relu(conv(x, w, Tensor(), 2, 1, 1));
    auto z = avg_pool(y, 3, 3);
    add_residual(z, z);
    add_skip(z, z);
    trace::set_enabled(false);

    CHECK(trace::count(trace::Kind::Conv2d) == 1);
    CHECK(trace::count(trace::Kind::Relu) == 1);
    CHECK(trace::count(trace::Kind::AvgPool) == 1);
    CHECK(trace::count(trace::Kind::ResidualAdd) == 1);
    CHECK(trace::count(trace::Kind::SkipAdd) == 1);
    CHECK(trace::count_conv_with_stride(2) == 1);
    CHECK(trace::count_conv_with_stride(1) == 0);

    // disabled -> nothing new is recorded
    const auto n = trace::events().size();
    relu(x);
    CHECK(trace::events().size() == n);
    trace::clear();
}

// ---- PRNG -------------------------------------------------------------------------------------

TEST_CASE("rng: deterministic, seed-sensitive, sane normal moments") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 16; ++i) {
        const double va = a.next_double();
        CHECK(va == b.next_double());
        CHECK(va >= 0.0);
        CHECK(va < 1.0);
    }
    bool differs = false;
    Rng a2(42);
    for (int i = 0; i < 16; ++i) differs |= a2.next_double() != c.next_double();
    CHECK(differs);

    Rng n(7);
    double mean = 0.0, var = 0.0;
    const int cnt = 20000;
    std::vector<double> xs(cnt);
    for (auto& v : xs) v = n.next_normal();
    for (double v : xs) mean += v;
    mean /= cnt;
    for (double v : xs) var += (v - mean) * (v - mean);
    var /= cnt;
    CHECK(std::fabs(mean) < 0.05);
    CHECK(std::fabs(var - 1.0) < 0.05);
}
