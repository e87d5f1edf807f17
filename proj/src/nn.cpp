#include "sled/nn.hpp"

#include <cmath>

#include "sled/errors.hpp"

namespace sled {

Tensor ParamStore::create(const std::string& name, const Shape& shape, std::vector<double> init,
                          bool requires_grad) {
    if (index_.count(name)) throw ParamError("ParamStore: duplicate name " + name);
    Tensor t = Tensor::from_data(shape, std::move(init), requires_grad);
    index_[name] = items_.size();
    items_.emplace_back(name, t);
    return t;
}

Tensor ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ParamError("ParamStore: no tensor named " + name);
    return items_[it->second].second;
}

bool ParamStore::contains(const std::string& name) const { return index_.count(name) != 0; }

std::int64_t ParamStore::total_elements() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
}

void ParamStore::zero_grads() {
    for (auto& [name, t] : items_) t.zero_grad();
}

std::vector<double> he_normal(Rng& rng, std::int64_t count, std::int64_t fan_in) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<double> v(static_cast<std::size_t>(count));
    for (auto& x : v) x = rng.next_normal() * std_dev;
    return v;
}

Tensor ConvBn::apply(const Tensor& x, bool training) const {
    Tensor y = conv(x, w, Tensor(), stride, pad, dil);
    y = batchnorm(y, gamma, beta, rmean, rvar, training);
    return relu_after ? relu(y) : y;
}

Tensor ProjConv::apply(const Tensor& x) const { return conv(x, w, b, 1, pad, 1); }

ConvBn make_convbn(ParamStore& params, ParamStore& buffers, Rng& rng, const std::string& name,
                   int spatial_rank, int ci, int co, int kernel, int stride, int pad, int dil,
                   bool relu_after) {
    ConvBn blk;
    Shape wshape = {co, ci};
    std::int64_t taps = 1;
    for (int a = 0; a < spatial_rank; ++a) {
        wshape.push_back(kernel);
        taps *= kernel;
    }
    blk.w = params.create(name + ".w", wshape, he_normal(rng, co * ci * taps, ci * taps), true);
    blk.gamma = params.create(name + ".gamma", {co}, std::vector<double>(co, 1.0), true);
    blk.beta = params.create(name + ".beta", {co}, std::vector<double>(co, 0.0), true);
    blk.rmean = buffers.create(name + ".rmean", {co}, std::vector<double>(co, 0.0), false);
    blk.rvar = buffers.create(name + ".rvar", {co}, std::vector<double>(co, 1.0), false);
    blk.stride = stride;
    blk.pad = pad;
    blk.dil = dil;
    blk.relu_after = relu_after;
    return blk;
}

ProjConv make_proj(ParamStore& params, Rng& rng, const std::string& name, int spatial_rank,
                   int ci, int co, int kernel, int pad) {
    ProjConv p;
    Shape wshape = {co, ci};
    std::int64_t taps = 1;
    for (int a = 0; a < spatial_rank; ++a) {
        wshape.push_back(kernel);
        taps *= kernel;
    }
    p.w = params.create(name + ".w", wshape, he_normal(rng, co * ci * taps, ci * taps), true);
    p.b = params.create(name + ".b", {co}, std::vector<double>(co, 0.0), true);
    p.pad = pad;
    return p;
}

Tensor residual_block(const ConvBn& block, const Tensor& x, bool training) {
    return add_residual(x, block.apply(x, training));
}

}  // namespace sled
