#include <doctest.h>

#include <cmath>
#include <vector>

#include "sled/errors.hpp"
#include "sled/nn.hpp"
#include "sled/random.hpp"
#include "sled/tensor.hpp"

using namespace sled;

TEST_CASE("ParamStore registers tensors in insertion order and aliases handles") {
    ParamStore store;
    Tensor a = store.create("alpha", {2, 3}, std::vector<double>(6, 1.0), true);
    Tensor b = store.create("beta", {4}, std::vector<double>(4, 2.0), false);

    CHECK(store.contains("alpha"));
    CHECK(store.contains("beta"));
    CHECK_FALSE(store.contains("gamma"));
    CHECK(store.total_elements() == 10);

    REQUIRE(store.items().size() == 2);
    CHECK(store.items()[0].first == "alpha");
    CHECK(store.items()[1].first == "beta");

    // get() returns a handle onto the same storage
    Tensor a2 = store.get("alpha");
    a2.data()[0] = 42.0;
    CHECK(a.data()[0] == 42.0);

    CHECK_THROWS_AS(store.get("missing"), ParamError);
    CHECK_THROWS_AS(
        store.create("alpha", {1}, std::vector<double>(1, 0.0), true), ParamError);
}

TEST_CASE("ParamStore::zero_grads resets accumulated gradients") {
    ParamStore store;
    Tensor w = store.create("w", {3}, {1.0, 2.0, 3.0}, true);
    backward(sum(mul(w, w)));
    REQUIRE(w.has_grad());
    CHECK(w.grad()[1] == doctest::Approx(4.0));
    store.zero_grads();
    for (double g : w.grad()) CHECK(g == 0.0);

    // grads accumulate across backward passes unless reset
    backward(sum(mul(w, w)));
    backward(sum(mul(w, w)));
    CHECK(w.grad()[1] == doctest::Approx(8.0));
}

TEST_CASE("he_normal draws the requested count with fan-in variance") {
    Rng rng(123);
    const std::int64_t n = 20000, fan_in = 50;
    auto vals = he_normal(rng, n, fan_in);
    REQUIRE(static_cast<std::int64_t>(vals.size()) == n);

    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);

    CHECK(std::fabs(mean) < 0.01);
    CHECK(var == doctest::Approx(2.0 / static_cast<double>(fan_in)).epsilon(0.05));

    // same seed, same stream
    Rng rng2(123);
    auto vals2 = he_normal(rng2, 8, fan_in);
    for (int i = 0; i < 8; ++i) CHECK(vals2[i] == vals[i]);
}

TEST_CASE("make_convbn registers weights/stats under dotted names") {
    ParamStore params, buffers;
    Rng rng(7);
    ConvBn cb = make_convbn(params, buffers, rng, "layer", 2, 3, 5, 3, 2, 1, 1);

    CHECK(params.contains("layer.w"));
    CHECK(params.contains("layer.gamma"));
    CHECK(params.contains("layer.beta"));
    CHECK(buffers.contains("layer.rmean"));
    CHECK(buffers.contains("layer.rvar"));

    CHECK(cb.w.shape() == Shape{5, 3, 3, 3});
    CHECK(params.total_elements() == 5 * 3 * 3 * 3 + 5 + 5);

    // batchnorm affine starts as identity, running stats at (0, 1)
    for (double g : cb.gamma.data()) CHECK(g == 1.0);
    for (double b : cb.beta.data()) CHECK(b == 0.0);
    for (double m : cb.rmean.data()) CHECK(m == 0.0);
    for (double v : cb.rvar.data()) CHECK(v == 1.0);
    CHECK(cb.stride == 2);
    CHECK(cb.relu_after);
}

TEST_CASE("ConvBn::apply produces the right shape and clamps when relu_after") {
    ParamStore params, buffers;
    Rng rng(11);
    ConvBn cb = make_convbn(params, buffers, rng, "c", 2, 2, 4, 3, 2, 1, 1, true);

    Rng data_rng(5);
    std::vector<double> img(2 * 8 * 8);
    for (auto& v : img) v = data_rng.next_normal();
    Tensor x = Tensor::from_data({1, 2, 8, 8}, img);

    Tensor y = cb.apply(x, /*training=*/true);
    CHECK(y.shape() == Shape{1, 4, 4, 4});
    for (double v : y.data()) CHECK(v >= 0.0);

    // training-mode batchnorm leaves each channel roughly standardized before
    // relu, so some activations must be exactly zero (negative pre-relu)
    int zeros = 0;
    for (double v : y.data()) zeros += v == 0.0;
    CHECK(zeros > 0);

    // eval mode uses the running buffers instead of batch statistics
    ConvBn cb2 = make_convbn(params, buffers, rng, "c2", 2, 2, 4, 3, 2, 1, 1, false);
    Tensor ye = cb2.apply(x, /*training=*/false);
    bool negative_seen = false;
    for (double v : ye.data()) negative_seen |= v < 0.0;
    CHECK(negative_seen);  // no relu on this block
}

TEST_CASE("3-d ConvBn handles volumetric inputs") {
    ParamStore params, buffers;
    Rng rng(3);
    ConvBn cb = make_convbn(params, buffers, rng, "v", 3, 2, 3, 3, 1, 1, 1);
    CHECK(cb.w.shape() == Shape{3, 2, 3, 3, 3});

    Tensor x = Tensor::full({1, 2, 4, 4, 4}, 0.5);
    Tensor y = cb.apply(x, true);
    CHECK(y.shape() == Shape{1, 3, 4, 4, 4});
}

TEST_CASE("make_proj registers a biased projection with zero bias init") {
    ParamStore params;
    Rng rng(9);
    ProjConv pj = make_proj(params, rng, "proj", 3, 16, 1, 3, 1);

    CHECK(params.contains("proj.w"));
    CHECK(params.contains("proj.b"));
    CHECK(pj.w.shape() == Shape{1, 16, 3, 3, 3});
    CHECK(params.total_elements() == 16 * 27 + 1);
    for (double b : pj.b.data()) CHECK(b == 0.0);

    Tensor x = Tensor::full({1, 16, 2, 2, 2}, 1.0);
    Tensor y = pj.apply(x);
    CHECK(y.shape() == Shape{1, 1, 2, 2, 2});

    // bias shifts every output element
    Tensor b2 = pj.b;
    b2.data()[0] = 10.0;
    Tensor y2 = pj.apply(x);
    for (std::size_t i = 0; i < y.data().size(); ++i)
        CHECK(y2.data()[i] == doctest::Approx(y.data()[i] + 10.0));
}

TEST_CASE("a 3x3x3 16->32 projection contributes 13856 parameters") {
    ParamStore params;
    Rng rng(1);
    make_proj(params, rng, "p", 3, 16, 32, 3, 1);
    CHECK(params.total_elements() == 3 * 3 * 3 * 16 * 32 + 32);
}

TEST_CASE("residual_block equals input plus its conv branch") {
    ParamStore params, buffers;
    Rng rng(21);
    ConvBn cb = make_convbn(params, buffers, rng, "rb", 3, 4, 4, 3, 1, 1, 1);

    Rng data_rng(2);
    std::vector<double> vals(4 * 3 * 4 * 4);
    for (auto& v : vals) v = data_rng.next_normal();
    Tensor x = Tensor::from_data({1, 4, 3, 4, 4}, vals);

    // residual output = x + relu(bn(conv(x))): recompute the branch with an
    // identically seeded twin so both sides start from fresh running stats
    ParamStore snapshot_params, snapshot_buffers;
    Rng rng2(21);
    ConvBn twin = make_convbn(snapshot_params, snapshot_buffers, rng2, "rb", 3, 4, 4, 3, 1,
                              1, 1);

    Tensor manual = add(x, twin.apply(x, true));
    Tensor got = residual_block(cb, x, true);
    REQUIRE(got.shape() == manual.shape());
    for (std::size_t i = 0; i < got.data().size(); ++i)
        CHECK(got.data()[i] == doctest::Approx(manual.data()[i]).epsilon(1e-12));

    // and the identity path keeps gradients flowing even where relu gates
    Tensor w = cb.w;
    backward(sum(got));
    CHECK(Tensor(x).has_grad() == false);  // x does not require grad
    CHECK(w.has_grad());
}

TEST_CASE("residual_block is tagged as a residual sum in the trace") {
    ParamStore params, buffers;
    Rng rng(4);
    ConvBn cb = make_convbn(params, buffers, rng, "rb", 3, 2, 2, 3, 1, 1, 1);
    Tensor x = Tensor::full({1, 2, 2, 2, 2}, 1.0);

    trace::clear();
    trace::set_enabled(true);
    residual_block(cb, x, true);
    trace::set_enabled(false);

    CHECK(trace::count(trace::Kind::ResidualAdd) == 1);
    CHECK(trace::count(trace::Kind::SkipAdd) == 0);
    CHECK(trace::count(trace::Kind::Conv3d) == 1);
}
