// Parameter registry and the conv/batchnorm building blocks shared by every
// network variant.
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sled/random.hpp"
#include "sled/tensor.hpp"

namespace sled {

// Ordered, named collection of tensors. Insertion order is the canonical
// iteration order everywhere (checkpoints, optimizer state, counting), which
// keeps runs reproducible.
class ParamStore {
public:
    Tensor create(const std::string& name, const Shape& shape, std::vector<double> init,
                  bool requires_grad);
    Tensor get(const std::string& name) const;
    bool contains(const std::string& name) const;
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::int64_t total_elements() const;
    void zero_grads();

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

// He-style fan-in initialization: N(0, sqrt(2/fan_in)), drawn from the seeded
// generator in element order.
std::vector<double> he_normal(Rng& rng, std::int64_t count, std::int64_t fan_in);

// conv (no bias) + batchnorm, optionally followed by ReLU.
struct ConvBn {
    Tensor w;
    Tensor gamma, beta;
    Tensor rmean, rvar;  // running statistics (buffers)
    int stride = 1, pad = 1, dil = 1;
    bool relu_after = true;

    Tensor apply(const Tensor& x, bool training) const;
};

// plain conv with bias, no norm/activation (final 1-channel projections)
struct ProjConv {
    Tensor w, b;
    int pad = 0;

    Tensor apply(const Tensor& x) const;
};

// Factories register every created tensor under `name.<piece>` in the given
// stores. `spatial_rank` is 2 for image convs, 3 for cost-volume convs.
ConvBn make_convbn(ParamStore& params, ParamStore& buffers, Rng& rng, const std::string& name,
                   int spatial_rank, int ci, int co, int kernel, int stride, int pad, int dil,
                   bool relu_after = true);
ProjConv make_proj(ParamStore& params, Rng& rng, const std::string& name, int spatial_rank,
                   int ci, int co, int kernel, int pad);

// One-conv residual block: x + relu(bn(conv(x))), the element-wise-sum fusion
// used by both encoder and decoder.
Tensor residual_block(const ConvBn& block, const Tensor& x, bool training);

}  // namespace sled
