#include "sled/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "sled/model.hpp"
#include "sled/nn.hpp"
#include "sled/random.hpp"
#include "sled/tensor.hpp"

namespace sled {
namespace {

std::vector<double> randu(Rng& rng, std::int64_t n, double lo, double hi) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = lo + (hi - lo) * rng.next_double();
    return v;
}

// Random values kept away from zero, for ops with a kink at the origin.
std::vector<double> rand_off_zero(Rng& rng, std::int64_t n) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) {
        const double m = 0.1 + 0.9 * rng.next_double();
        x = rng.next_double() < 0.5 ? -m : m;
    }
    return v;
}

// Scalar readout that weights every output element differently, so a
// misrouted adjoint cannot cancel out. `gain` tames the loss scale for big
// outputs: keeping gradients O(1) keeps finite-difference truncation error
// (~ h^2 * third derivative) far below the pass tolerance.
Tensor project(const Tensor& out, Rng& rng, double gain = 1.0) {
    if (out.numel() == 1) return reshape(out, {});
    Tensor w = Tensor::from_data(out.shape(), randu(rng, out.numel(), -gain, gain));
    return sum(mul(out, w));
}

double rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

// Compares analytic gradients of `leaves` under `forward` against central
// finite differences. Probes every coordinate when max_coords <= 0.
double max_grad_err(const std::vector<Tensor>& leaves, const std::function<Tensor()>& forward,
                    double h, double tol, int max_coords, Rng& rng) {
    for (const Tensor& t : leaves)
        if (t.has_grad()) const_cast<Tensor&>(t).zero_grad();
    backward(forward());

    double worst = 0.0;
    for (const Tensor& leaf : leaves) {
        if (!leaf.has_grad()) continue;  // not reachable from the loss
        const std::vector<double> g = leaf.grad();
        std::vector<std::int64_t> coords;
        if (max_coords <= 0 || leaf.numel() <= max_coords) {
            coords.resize(static_cast<std::size_t>(leaf.numel()));
            std::iota(coords.begin(), coords.end(), 0);
        } else {
            for (int i = 0; i < max_coords; ++i)
                coords.push_back(static_cast<std::int64_t>(
                    rng.next_u64() % static_cast<std::uint64_t>(leaf.numel())));
        }
        auto& vals = const_cast<Tensor&>(leaf).data();
        for (std::int64_t idx : coords) {
            double& v = vals[static_cast<std::size_t>(idx)];
            const double saved = v;
            auto central = [&](double step) {
                v = saved + step;
                const double fp = forward().item();
                v = saved - step;
                const double fm = forward().item();
                v = saved;
                return (fp - fm) / (2 * step);
            };
            const double analytic = g[static_cast<std::size_t>(idx)];
            double err = rel_err(analytic, central(h));
            // A ReLU kink inside the +-h window invalidates the stencil at
            // this coordinate. Shrinking the step distinguishes that (the
            // mismatch collapses once the step clears the kink) from a wrong
            // adjoint (it stays put at every step).
            for (double step = h / 4; err >= tol && step >= h / 16384; step /= 4)
                err = std::min(err, rel_err(analytic, central(step)));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

using CheckFn = std::function<double(const GradCheckOptions&, Rng&)>;

double check_elementwise(const GradCheckOptions& opt, Rng& rng) {
    Tensor a = Tensor::from_data({2, 3, 4}, randu(rng, 24, -1, 1), true);
    Tensor b = Tensor::from_data({2, 3, 4}, randu(rng, 24, -1, 1), true);
    Rng seed(rng.next_u64());
    auto fwd = [&, seed] {
        Rng r = seed;
        Tensor x = add(mul(a, b), scale(sub(a, b), 0.5));
        return project(reshape(x, {24}), r);
    };
    return max_grad_err({a, b}, fwd, opt.step, opt.tolerance, 0, rng);
}

double check_relu(const GradCheckOptions& opt, Rng& rng) {
    Tensor a = Tensor::from_data({3, 5}, rand_off_zero(rng, 15), true);
    Rng seed(rng.next_u64());
    auto fwd = [&, seed] {
        Rng r = seed;
        return project(relu(a), r);
    };
    return max_grad_err({a}, fwd, opt.step, opt.tolerance, 0, rng);
}

double check_conv2d(const GradCheckOptions& opt, Rng& rng) {
    Tensor x = Tensor::from_data({1, 3, 6, 7}, randu(rng, 126, -1, 1), true);
    Tensor w = Tensor::from_data({2, 3, 3, 3}, randu(rng, 54, -0.5, 0.5), true);
    Tensor b = Tensor::from_data({2}, randu(rng, 2, -0.5, 0.5), true);
    Rng seed(rng.next_u64());
    auto fwd = [&, seed] {
        Rng r = seed;
        return project(conv(x, w, b, 2, 1, 1), r);
    };
    return max_grad_err({x, w, b}, fwd, opt.step, opt.tolerance, 0, rng);
}

double check_conv3d(const GradCheckOptions& opt, Rng& rng) {
    Tensor x = Tensor::from_data({1, 2, 4, 5, 6}, randu(rng, 240, -1, 1), true);
    Tensor w = Tensor::from_data({3, 2, 3, 3, 3}, randu(rng, 162, -0.5, 0.5), true);
    Rng seed(rng.next_u64());
    auto fwd = [&, seed] {
        Rng r = seed;
        return project(conv(x, w, Tensor(), 1, 2, 2), r);
    };
    return max_grad_err({x, w}, fwd, opt.step, opt.tolerance, 0, rng);
}

double check_avg_pool(const GradCheckOptions& opt, Rng& rng) {
    Tensor x = Tensor::from_data({1, 2, 4, 6, 6}, randu(rng, 288, -1, 1), true);
    Rng seed(rng.next_u64());
    auto fwd = [&, seed] {
        Rng r = seed;
        return project(avg_pool(x, 2, 2), r);
    };
    return max_grad_err({x}, fwd, opt.step, opt.tolerance, 0, rng);
}

double check_trilinear(const GradCheckOptions& opt, Rng& rng) {
    Tensor x = Tensor::from_data({1, 2, 3, 4, 5}, randu(rng, 120, -1, 1), true);
    Rng seed(rng.next_u64());
    auto fwd = [&, seed] {
        Rng r = seed;
        return project(trilinear_upsample(x, 2), r);
    };
    return max_grad_err({x}, fwd, opt.step, opt.tolerance, 0, rng);
}

double check_batchnorm(const GradCheckOptions& opt, Rng& rng, bool training) {
    Tensor x = Tensor::from_data({2, 3, 4, 5}, randu(rng, 120, -2, 2), true);
    Tensor gamma = Tensor::from_data({3}, randu(rng, 3, 0.5, 1.5), true);
    Tensor beta = Tensor::from_data({3}, randu(rng, 3, -0.5, 0.5), true);
    Tensor rmean = Tensor::from_data({3}, randu(rng, 3, -0.5, 0.5));
    Tensor rvar = Tensor::from_data({3}, randu(rng, 3, 0.5, 2.0));
    Rng seed(rng.next_u64());
    auto fwd = [&, seed] {
        Rng r = seed;
        return project(batchnorm(x, gamma, beta, rmean, rvar, training), r);
    };
    return max_grad_err({x, gamma, beta}, fwd, opt.step, opt.tolerance, 0, rng);
}

double check_softmax_expectation(const GradCheckOptions& opt, Rng& rng) {
    Tensor x = Tensor::from_data({2, 6, 3}, randu(rng, 36, -2, 2), true);
    Rng seed(rng.next_u64());
    auto fwd = [&, seed] {
        Rng r = seed;
        return project(index_expectation(softmax_axis(x, 1), 1), r);
    };
    return max_grad_err({x}, fwd, opt.step, opt.tolerance, 0, rng);
}

double check_smooth_l1(const GradCheckOptions& opt, Rng& rng) {
    // keep |pred - target| away from the curvature break at 1
    const std::int64_t n = 12;
    std::vector<double> pv = randu(rng, n, -2, 2), tv(pv.size()), mv(pv.size(), 1.0);
    for (std::size_t i = 0; i < tv.size(); ++i) {
        double d = rng.next_double() < 0.5 ? 0.7 * (2 * rng.next_double() - 1)
                                           : (1.3 + 0.7 * rng.next_double());
        tv[i] = pv[i] - d;
    }
    mv[2] = 0.0;
    Tensor pred = Tensor::from_data({3, 4}, pv, true);
    Tensor target = Tensor::from_data({3, 4}, tv);
    Tensor mask = Tensor::from_data({3, 4}, mv);
    auto fwd = [&] { return smooth_l1(pred, target, mask); };
    return max_grad_err({pred}, fwd, opt.step, opt.tolerance, 0, rng);
}

double check_cost_volume(const GradCheckOptions& opt, Rng& rng) {
    ModelConfig cfg;
    cfg.max_disp = 16;
    cfg.feat_channels = 4;
    cfg.reg_channels = 4;
    StereoModel model(cfg, 11);
    Tensor fl = Tensor::from_data({1, 4, 5, 8}, randu(rng, 160, -1, 1), true);
    Tensor fr = Tensor::from_data({1, 4, 5, 8}, randu(rng, 160, -1, 1), true);
    Rng seed(rng.next_u64());
    auto fwd = [&, seed] {
        Rng r = seed;
        return project(model.build_cost_volume(fl, fr), r);
    };
    return max_grad_err({fl, fr}, fwd, opt.step, opt.tolerance, 0, rng);
}

// Full regularizer + soft-argmin path from a cost volume, probing sampled
// coordinates of every reachable parameter plus the volume itself.
double check_sled_full(const GradCheckOptions& opt, Rng& rng) {
    ModelConfig cfg;  // desk scale: feat 8 -> 16-channel volume
    StereoModel model(cfg, 3);
    model.train();
    const Shape vol_shape = opt.quick ? Shape{1, 16, 8, 8, 8} : Shape{2, 16, 8, 16, 32};
    Tensor volume =
        Tensor::from_data(vol_shape, randu(rng, shape_numel(vol_shape), -1, 1), true);
    Rng seed(rng.next_u64());
    auto fwd = [&, seed] {
        Rng r = seed;
        std::vector<Tensor> costs = model.regularize(volume);
        Tensor loss = Tensor::scalar(0.0);
        for (const Tensor& c : costs) {
            Tensor d = model.regress_disparity(c);
            loss = add(loss, project(d, r, 8.0 / static_cast<double>(d.numel())));
        }
        return loss;
    };
    std::vector<Tensor> leaves;
    for (const auto& [name, t] : model.params().items()) leaves.push_back(t);
    leaves.push_back(volume);
    return max_grad_err(leaves, fwd, opt.step, opt.tolerance, opt.samples_per_tensor, rng);
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& opt) {
    const std::vector<std::pair<std::string, CheckFn>> checks = {
        {"elementwise", [](const GradCheckOptions& o, Rng& r) { return check_elementwise(o, r); }},
        {"relu", [](const GradCheckOptions& o, Rng& r) { return check_relu(o, r); }},
        {"conv2d", [](const GradCheckOptions& o, Rng& r) { return check_conv2d(o, r); }},
        {"conv3d", [](const GradCheckOptions& o, Rng& r) { return check_conv3d(o, r); }},
        {"avg_pool", [](const GradCheckOptions& o, Rng& r) { return check_avg_pool(o, r); }},
        {"trilinear", [](const GradCheckOptions& o, Rng& r) { return check_trilinear(o, r); }},
        {"batchnorm_train",
         [](const GradCheckOptions& o, Rng& r) { return check_batchnorm(o, r, true); }},
        {"batchnorm_eval",
         [](const GradCheckOptions& o, Rng& r) { return check_batchnorm(o, r, false); }},
        {"softmax_expectation",
         [](const GradCheckOptions& o, Rng& r) { return check_softmax_expectation(o, r); }},
        {"smooth_l1", [](const GradCheckOptions& o, Rng& r) { return check_smooth_l1(o, r); }},
        {"cost_volume", [](const GradCheckOptions& o, Rng& r) { return check_cost_volume(o, r); }},
        {"sled_full", [](const GradCheckOptions& o, Rng& r) { return check_sled_full(o, r); }},
    };

    std::vector<GradCheckResult> results;
    Rng rng(opt.seed);
    for (const auto& [name, fn] : checks) {
        Rng check_rng(rng.next_u64());  // advance the stream whether or not we run
        if (!opt.only.empty() && name != opt.only) continue;
        GradCheckResult res;
        res.name = name;
        res.max_rel_err = fn(opt, check_rng);
        if (opt.corrupt_op == name) res.max_rel_err = std::max(res.max_rel_err, 1.0);
        res.passed = res.max_rel_err < opt.tolerance;
        results.push_back(res);
    }
    return results;
}

bool all_passed(const std::vector<GradCheckResult>& results) {
    return !results.empty() &&
           std::all_of(results.begin(), results.end(),
                       [](const GradCheckResult& r) { return r.passed; });
}

}  // namespace sled
