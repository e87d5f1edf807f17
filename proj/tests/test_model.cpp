#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "sled/checkpoint.hpp"
#include "sled/errors.hpp"
#include "sled/model.hpp"
#include "sled/random.hpp"
#include "sled/tensor.hpp"

using namespace sled;

namespace {

ModelConfig desk(Regularizer reg = Regularizer::SLED) {
    ModelConfig mc;  // defaults are the desk-scale SLED arrangement
    mc.regularizer = reg;
    return mc;
}

Tensor random_image(Rng& rng, std::int64_t h, std::int64_t w) {
    std::vector<double> vals(static_cast<std::size_t>(3 * h * w));
    for (auto& v : vals) v = rng.next_normal();
    return Tensor::from_data({1, 3, h, w}, vals);
}

}  // namespace

TEST_CASE("regularizer tokens, labels, and hourglass counts") {
    for (auto r : {Regularizer::SLED, Regularizer::SCC, Regularizer::HG1, Regularizer::HG2,
                   Regularizer::HG3})
        CHECK(regularizer_from_token(regularizer_token(r)) == r);
    CHECK(regularizer_token(Regularizer::SLED) == "sled");
    CHECK(regularizer_display(Regularizer::SLED) == "SLED-Net");
    CHECK(regularizer_display(Regularizer::SCC) == "SCC-Net");
    CHECK(regularizer_display(Regularizer::HG2) == "2HGs");
    CHECK(hourglass_count(Regularizer::SLED) == 0);
    CHECK(hourglass_count(Regularizer::HG3) == 3);
    CHECK_THROWS_AS(regularizer_from_token("resnet"), ParamError);
}

TEST_CASE("ModelConfig validation") {
    ModelConfig mc = desk();
    CHECK_NOTHROW(mc.validate());

    mc.max_disp = 30;  // not a multiple of 4
    CHECK_THROWS_AS(mc.validate(), ParamError);
    mc = desk();
    mc.max_disp = 0;
    CHECK_THROWS_AS(mc.validate(), ParamError);
    mc = desk();
    mc.feat_channels = 0;
    CHECK_THROWS_AS(mc.validate(), ParamError);
    mc = desk();
    mc.atrous_dilation = 0;
    CHECK_THROWS_AS(mc.validate(), ParamError);
    mc = desk();
    mc.encoder_block_layout = {2, 2, 2, 0};
    CHECK_THROWS_AS(mc.validate(), ParamError);
    mc = desk();
    mc.encoder_block_layout = {3, 3, 1, 1};  // sums to 8: still a valid encoder
    CHECK_NOTHROW(mc.validate());
    mc.encoder_block_layout = {3, 3, 3, 3};  // 12 blocks is a different network
    CHECK_THROWS_AS(mc.validate(), ParamError);
    mc.regularizer = Regularizer::HG2;       // the layout only binds the long encoder
    CHECK_NOTHROW(mc.validate());
}

TEST_CASE("config digests are stable and field-sensitive") {
    ModelConfig mc = desk();
    const std::string d = mc.digest();
    CHECK(d.size() == 16);
    CHECK(d.find_first_not_of("0123456789abcdef") == std::string::npos);
    CHECK(mc.digest() == d);  // pure function

    std::set<std::string> seen = {d};
    ModelConfig v = desk();
    v.max_disp = 64;
    CHECK(seen.insert(v.digest()).second);
    v = desk();
    v.regularizer = Regularizer::HG1;
    CHECK(seen.insert(v.digest()).second);
    v = desk();
    v.paper_scale = true;
    CHECK(seen.insert(v.digest()).second);
    v = desk();
    v.encoder_block_layout = {1, 3, 2, 2};
    CHECK(seen.insert(v.digest()).second);
}

TEST_CASE("feature extraction maps [N,3,H,W] to quarter-scale descriptors") {
    StereoModel model(desk(), 1);
    model.eval();
    Rng rng(2);
    for (std::int64_t hw : {64, 96, 128}) {
        Tensor img = random_image(rng, hw, hw);
        Tensor f = model.extract_features(img);
        CHECK(f.shape() == Shape{1, 8, hw / 4, hw / 4});
    }

    CHECK_THROWS_AS(model.extract_features(Tensor::full({1, 1, 64, 64}, 0.0)), ShapeError);
    CHECK_THROWS_AS(model.extract_features(Tensor::full({1, 3, 60, 64}, 0.0)), ShapeError);
    CHECK_THROWS_AS(model.extract_features(Tensor::full({3, 64, 64}, 0.0)), ShapeError);
}

TEST_CASE("cost volume matches the reference assembly") {
    StereoModel model(desk(), 3);
    const std::int64_t N = 1, C = 8, H = 6, W = 12, D = 8;  // max_disp 32 -> D 8

    Rng rng(5);
    std::vector<double> lv(static_cast<std::size_t>(N * C * H * W));
    std::vector<double> rv(lv.size());
    for (auto& v : lv) v = rng.next_normal();
    for (auto& v : rv) v = rng.next_normal();
    Tensor fl = Tensor::from_data({N, C, H, W}, lv);
    Tensor fr = Tensor::from_data({N, C, H, W}, rv);

    Tensor vol = model.build_cost_volume(fl, fr);
    REQUIRE(vol.shape() == Shape{N, 2 * C, D, H, W});

    auto ref = oracle::cost_volume(lv, rv, N, C, H, W, D);
    REQUIRE(ref.size() == vol.data().size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(vol.data()[i] == ref[i]);

    SUBCASE("mismatched feature shapes are rejected") {
        Tensor small = Tensor::full({N, C, H, W / 2}, 0.0);
        CHECK_THROWS_AS(model.build_cost_volume(fl, small), ShapeError);
    }

    SUBCASE("the disparity range cannot exceed the feature width") {
        ModelConfig wide = desk();
        wide.max_disp = 64;  // D = 16 > W = 12
        StereoModel m2(wide, 1);
        CHECK_THROWS_AS(m2.build_cost_volume(fl, fr), ParamError);
    }
}

TEST_CASE("a shifted right image concentrates correlation at the true slice") {
    // shift the left features to make the right view: slice d* should then be
    // the one where both halves agree perfectly (away from the border)
    StereoModel model(desk(), 4);
    const std::int64_t C = 8, H = 4, W = 16, dstar = 3;

    Rng rng(6);
    std::vector<double> lv(static_cast<std::size_t>(C * H * W));
    for (auto& v : lv) v = rng.next_normal();
    std::vector<double> rv(lv.size(), 0.0);
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w)
                if (w - dstar >= 0)
                    rv[static_cast<std::size_t>((c * H + h) * W + w - dstar)] =
                        lv[static_cast<std::size_t>((c * H + h) * W + w)];

    Tensor vol = model.build_cost_volume(Tensor::from_data({1, C, H, W}, lv),
                                         Tensor::from_data({1, C, H, W}, rv));
    const auto& v = vol.data();
    auto at = [&](std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w) {
        return v[static_cast<std::size_t>((((c) * 8 + d) * H + h) * W + w)];
    };
    // left half and right half agree exactly at d = dstar for w >= dstar
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = dstar; w < W; ++w)
                CHECK(at(c, dstar, h, w) == at(C + c, dstar, h, w));
    // and disagree somewhere at every other slice
    for (std::int64_t d = 0; d < 8; ++d) {
        if (d == dstar) continue;
        bool differs = false;
        for (std::int64_t c = 0; c < C && !differs; ++c)
            for (std::int64_t h = 0; h < H && !differs; ++h)
                for (std::int64_t w = 0; w < W && !differs; ++w)
                    differs = at(c, d, h, w) != at(C + c, d, h, w);
        CHECK(differs);
    }
}

TEST_CASE("soft-argmin readout") {
    StereoModel model(desk(), 7);

    SUBCASE("a uniform cost volume regresses to the range midpoint") {
        Tensor cost = Tensor::full({1, 1, 8, 4, 8}, 0.7);
        Tensor disp = model.regress_disparity(cost);
        REQUIRE(disp.shape() == Shape{1, 16, 32});
        for (double v : disp.data()) CHECK(v == doctest::Approx(15.5));  // (32-1)/2
    }

    SUBCASE("matches the reference chain on random volumes") {
        Rng rng(8);
        for (int trial = 0; trial < 3; ++trial) {
            std::vector<double> cv(1 * 1 * 8 * 4 * 8);
            for (auto& v : cv) v = rng.next_normal();
            Tensor cost = Tensor::from_data({1, 1, 8, 4, 8}, cv);
            Tensor disp = model.regress_disparity(cost);

            auto up = oracle::trilinear3d(cv, 1, 8, 4, 8, 4);
            for (auto& v : up) v = -v;
            auto probs = oracle::softmax(up, 1, 32, 16 * 32);
            auto ref = oracle::index_expectation(probs, 1, 32, 16 * 32);
            REQUIRE(ref.size() == disp.data().size());
            for (std::size_t i = 0; i < ref.size(); ++i)
                CHECK(disp.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
        }
    }

    SUBCASE("a strongly preferred slice pulls the readout to it") {
        // low cost = preferred; favor the last quarter-scale slice, which maps
        // to the last full-resolution index 31 under corner-aligned upsampling
        std::vector<double> cv(1 * 1 * 8 * 4 * 8, 0.0);
        for (std::int64_t h = 0; h < 4; ++h)
            for (std::int64_t w = 0; w < 8; ++w)
                cv[static_cast<std::size_t>(((7 * 4) + h) * 8 + w)] = -60.0;
        Tensor disp = model.regress_disparity(Tensor::from_data({1, 1, 8, 4, 8}, cv));
        for (double v : disp.data()) CHECK(v == doctest::Approx(31.0).epsilon(1e-3));
    }

    SUBCASE("rejects volumes whose depth disagrees with max_disp") {
        CHECK_THROWS_AS(model.regress_disparity(Tensor::full({1, 1, 4, 4, 8}, 0.0)),
                        ParamError);
    }
}

TEST_CASE("full forward produces supervised full-resolution maps") {
    for (auto reg : {Regularizer::SLED, Regularizer::SCC}) {
        CAPTURE(regularizer_token(reg));
        StereoModel model(desk(reg), 11);
        model.eval();
        Rng rng(12);
        Tensor left = random_image(rng, 64, 96);
        Tensor right = random_image(rng, 64, 96);

        ModelOutputs out = model.forward(left, right);
        CHECK(out.initial.shape() == Shape{1, 64, 96});
        CHECK(out.refined.shape() == Shape{1, 64, 96});
        REQUIRE(static_cast<int>(out.all.size()) == model.num_outputs());
        CHECK(out.all.size() == 2);
        CHECK(all_finite(out.initial));
        CHECK(all_finite(out.refined));
        for (double v : out.refined.data()) {
            CHECK(v >= 0.0);
            CHECK(v <= 31.0);
        }
    }
}

TEST_CASE("hourglass variants emit one output per stage plus the initial") {
    ModelConfig mc = desk(Regularizer::HG2);
    mc.max_disp = 64;  // HG needs depth divisible by 16 at quarter scale
    StereoModel model(mc, 13);
    model.eval();
    CHECK(model.num_outputs() == 3);

    Rng rng(14);
    Tensor left = random_image(rng, 64, 64);
    Tensor right = random_image(rng, 64, 64);
    ModelOutputs out = model.forward(left, right);
    CHECK(out.all.size() == 3);
    for (const auto& t : out.all) CHECK(t.shape() == Shape{1, 64, 64});

    SUBCASE("insufficient resolution for the hourglass pyramid is rejected") {
        ModelConfig bad = desk(Regularizer::HG1);
        bad.max_disp = 32;  // quarter-scale depth 8 cannot be halved 4 times
        StereoModel m2(bad, 1);
        Rng r2(1);
        CHECK_THROWS_AS(m2.forward(random_image(r2, 64, 64), random_image(r2, 64, 64)),
                        ShapeError);
    }
}

TEST_CASE("forward validates its image pair") {
    StereoModel model(desk(), 15);
    Rng rng(16);
    Tensor ok = random_image(rng, 64, 64);
    CHECK_THROWS_AS(model.forward(ok, random_image(rng, 64, 96)), ShapeError);
    CHECK_THROWS_AS(model.forward(ok, Tensor::full({1, 3, 64, 60}, 0.0)), ShapeError);
}

TEST_CASE("an all-zero volume still regularizes to finite costs") {
    StereoModel model(desk(), 17);
    model.eval();
    Tensor vol = Tensor::zeros({1, 16, 8, 8, 16});
    auto costs = model.regularize(vol);
    REQUIRE(costs.size() == 2);
    for (const auto& c : costs) {
        CHECK(c.shape() == Shape{1, 1, 8, 8, 16});
        CHECK(all_finite(c));
    }

    CHECK_THROWS_AS(model.regularize(Tensor::zeros({1, 8, 8, 8, 16})), ShapeError);
    CHECK_THROWS_AS(model.regularize(Tensor::zeros({1, 16, 6, 8, 16})), ShapeError);
}

TEST_CASE("the long encoder-decoder runs 8 residual blocks, 3 pools, 3 skips") {
    StereoModel model(desk(Regularizer::SLED), 19);
    model.eval();
    Tensor vol = Tensor::zeros({1, 16, 8, 8, 16});

    trace::clear();
    trace::set_enabled(true);
    model.regularize(vol);
    trace::set_enabled(false);

    // encoder first: every residual block before the first upsampling
    const auto& ev = trace::events();
    int res_before_decoder = 0;
    for (const auto& e : ev) {
        if (e.kind == trace::Kind::Trilinear) break;
        res_before_decoder += e.kind == trace::Kind::ResidualAdd;
    }
    CHECK(res_before_decoder == 8);
    CHECK(trace::count(trace::Kind::AvgPool) == 3);
    CHECK(trace::count(trace::Kind::Trilinear) == 3);
    CHECK(trace::count(trace::Kind::SkipAdd) == 3);
    // decoder fusion stages are residual too: 8 encoder + 3 decoder
    CHECK(trace::count(trace::Kind::ResidualAdd) == 11);
    CHECK(trace::count_conv_with_stride(2) == 0);  // scale changes only by pooling

    SUBCASE("a 3-3-1-1 layout still runs 8 blocks before the decoder") {
        ModelConfig mc = desk(Regularizer::SLED);
        mc.encoder_block_layout = {3, 3, 1, 1};
        StereoModel m2(mc, 20);
        m2.eval();
        trace::clear();
        trace::set_enabled(true);
        m2.regularize(vol);
        trace::set_enabled(false);
        int res = 0;
        for (const auto& e : trace::events()) {
            if (e.kind == trace::Kind::Trilinear) break;
            res += e.kind == trace::Kind::ResidualAdd;
        }
        CHECK(res == 8);
    }
}

TEST_CASE("each hourglass runs exactly 4 stride-2 convs and 4 upsamplings") {
    for (auto reg : {Regularizer::HG1, Regularizer::HG2, Regularizer::HG3}) {
        CAPTURE(regularizer_token(reg));
        ModelConfig mc = desk(reg);
        mc.max_disp = 64;
        StereoModel model(mc, 23);
        model.eval();
        Tensor vol = Tensor::zeros({1, 16, 16, 16, 16});

        trace::clear();
        trace::set_enabled(true);
        model.regularize(vol);
        trace::set_enabled(false);

        const int k = hourglass_count(reg);
        CHECK(trace::count_conv_with_stride(2) == 4 * k);
        CHECK(trace::count(trace::Kind::Trilinear) == 4 * k);
        CHECK(trace::count(trace::Kind::AvgPool) == 0);
    }
}

TEST_CASE("the plain cascade has no scale changes at all") {
    StereoModel model(desk(Regularizer::SCC), 27);
    model.eval();
    trace::clear();
    trace::set_enabled(true);
    model.regularize(Tensor::zeros({1, 16, 8, 8, 16}));
    trace::set_enabled(false);
    CHECK(trace::count(trace::Kind::AvgPool) == 0);
    CHECK(trace::count(trace::Kind::Trilinear) == 0);
    CHECK(trace::count(trace::Kind::SkipAdd) == 0);
    CHECK(trace::count_conv_with_stride(2) == 0);
}

TEST_CASE("parameter totals at published scale") {
    ModelConfig mc;
    mc.paper_scale = true;
    mc.max_disp = 192;

    mc.regularizer = Regularizer::SCC;
    const auto scc = count_parameters(mc);
    mc.regularizer = Regularizer::HG1;
    const auto hg1 = count_parameters(mc);
    mc.regularizer = Regularizer::HG2;
    const auto hg2 = count_parameters(mc);
    mc.regularizer = Regularizer::HG3;
    const auto hg3 = count_parameters(mc);
    mc.regularizer = Regularizer::SLED;
    const auto sled = count_parameters(mc);

    CHECK(scc == 365986);
    CHECK(hg1 == 781218);
    CHECK(hg2 == 1335875);
    CHECK(hg3 == 1890532);
    CHECK(sled == 1511458);

    // stacking cost is constant per hourglass; the long encoder-decoder sits
    // well under three stacks
    CHECK(hg2 - hg1 == hg3 - hg2);
    CHECK(scc < hg1);
    CHECK(hg1 < sled);
    CHECK(sled < hg3);
}

TEST_CASE("desk-scale parameter count is stable") {
    CHECK(count_parameters(desk()) == 350810);
}

TEST_CASE("every registered parameter receives gradient from the loss") {
    // the checkpoint and the optimizer both trust the registry, so nothing in
    // it may be disconnected from the forward graph
    for (auto reg : {Regularizer::SLED, Regularizer::SCC, Regularizer::HG1}) {
        CAPTURE(regularizer_token(reg));
        ModelConfig mc = desk(reg);
        if (hourglass_count(reg) > 0) mc.max_disp = 64;
        StereoModel model(mc, 29);
        model.train();

        Rng rng(30);
        Tensor left = random_image(rng, 64, 64);
        Tensor right = random_image(rng, 64, 64);
        ModelOutputs out = model.forward(left, right);

        Tensor loss = sum(out.all[0]);
        for (std::size_t i = 1; i < out.all.size(); ++i) loss = add(loss, sum(out.all[i]));
        backward(loss);

        for (const auto& [name, t] : model.params().items()) {
            CAPTURE(name);
            CHECK(t.has_grad());
        }
    }
}

TEST_CASE("construction is deterministic in the seed") {
    StereoModel a(desk(), 31);
    StereoModel b(desk(), 31);
    StereoModel c(desk(), 32);

    const auto& ia = a.params().items();
    const auto& ib = b.params().items();
    REQUIRE(ia.size() == ib.size());
    bool all_equal = true, any_differs_c = false;
    for (std::size_t i = 0; i < ia.size(); ++i) {
        CHECK(ia[i].first == ib[i].first);
        all_equal &= ia[i].second.data() == ib[i].second.data();
        any_differs_c |= ia[i].second.data() != c.params().items()[i].second.data();
    }
    CHECK(all_equal);
    CHECK(any_differs_c);
}

TEST_CASE("checkpoints round-trip bitwise and refuse mismatched configs") {
    const std::string path = "/tmp/sled_test_ckpt.bin";
    StereoModel model(desk(), 33);
    // nudge the buffers away from init so they are exercised too
    Rng rng(34);
    Tensor img = random_image(rng, 64, 64);
    model.train();
    model.forward(img, img);
    save_checkpoint(model, path);

    CHECK(checkpoint_digest(path) == model.config().digest());

    StereoModel twin(desk(), 99);  // different init, same architecture
    load_checkpoint(twin, path);
    const auto& a = model.params().items();
    const auto& b = twin.params().items();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].second.data() == b[i].second.data());
    const auto& ba = model.buffers().items();
    const auto& bb = twin.buffers().items();
    for (std::size_t i = 0; i < ba.size(); ++i)
        CHECK(ba[i].second.data() == bb[i].second.data());

    const std::string path2 = "/tmp/sled_test_ckpt2.bin";
    save_checkpoint(twin, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), {});
    std::string s2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(s1 == s2);

    ModelConfig other = desk();
    other.max_disp = 64;
    StereoModel wrong(other, 1);
    CHECK_THROWS_AS(load_checkpoint(wrong, path), CompatError);

    CHECK_THROWS_AS(load_checkpoint(twin, "/tmp/sled_no_such_ckpt.bin"), ParseError);
}
