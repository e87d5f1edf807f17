// Stereo disparity network: Siamese feature backbone, concatenation cost
// volume, one of four cost regularizers (single long encoder-decoder, plain
// cascade, or stacked hourglasses), and soft-argmin disparity regression.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sled/nn.hpp"
#include "sled/tensor.hpp"

namespace sled {

enum class Regularizer { SLED, SCC, HG1, HG2, HG3 };

std::string regularizer_token(Regularizer r);        // config token, e.g. "sled", "hg2"
std::string regularizer_display(Regularizer r);      // table label, e.g. "SLED-Net", "2HGs"
Regularizer regularizer_from_token(const std::string& token);
int hourglass_count(Regularizer r);                  // 0 for SLED/SCC

struct ModelConfig {
    int max_disp = 32;       // full-resolution disparity range
    int feat_channels = 8;   // backbone output channels C
    int reg_channels = 16;   // regularizer base channels at 1/4 scale
    Regularizer regularizer = Regularizer::SLED;
    std::array<int, 4> encoder_block_layout = {2, 2, 2, 2};  // blocks at 1/4,1/8,1/16,1/32
    int atrous_dilation = 2;
    bool paper_scale = false;  // channel widths sized for the published parameter counts

    int eff_feat() const { return paper_scale ? 32 : feat_channels; }
    int eff_reg() const { return paper_scale ? 32 : reg_channels; }

    void validate() const;       // throws ParamError on any violation
    std::string digest() const;  // 16-hex-digit fingerprint of every field
};

struct ModelOutputs {
    Tensor initial;               // [N,H,W]
    Tensor refined;               // [N,H,W]
    std::vector<Tensor> all;      // every supervised disparity, initial first
};

class StereoModel {
public:
    StereoModel(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    ParamStore& buffers() { return buffers_; }
    const ParamStore& buffers() const { return buffers_; }

    void train() { training_ = true; }
    void eval() { training_ = false; }
    bool is_training() const { return training_; }

    // [N,3,H,W] -> [N,C,H/4,W/4]; H and W must be divisible by 32.
    Tensor extract_features(const Tensor& image) const;

    // Concatenation volume [N,2C,max_disp/4,H/4,W/4]: left features at every
    // disparity slice, right features shifted right by the slice index.
    Tensor build_cost_volume(const Tensor& feat_left, const Tensor& feat_right) const;

    // Full regularizer path: shared pre-convs, variant core, projection
    // heads. Returns every supervised cost [N,1,D/4,H/4,W/4], initial first.
    std::vector<Tensor> regularize(const Tensor& volume) const;

    // Soft-argmin readout: trilinear x4 to full resolution, then
    // sum_d d * softmax_d(-cost) -> [N,H,W].
    Tensor regress_disparity(const Tensor& cost) const;

    // End-to-end: every supervised disparity map at full resolution.
    ModelOutputs forward(const Tensor& left, const Tensor& right) const;

    std::int64_t count_parameters() const { return params_.total_elements(); }
    int num_outputs() const;  // supervised outputs (2 for SLED/SCC, k+1 for HG(k))

private:
    struct Head {
        ConvBn conv;
        ProjConv proj;
        Tensor apply(const Tensor& x, bool training) const;
    };
    struct Hourglass {
        std::vector<ConvBn> enc;  // 4 stride-2 convs
        std::vector<ConvBn> dec;  // 4 (trilinear x2 + conv) stages
        Head head;
    };

    Tensor sled_core(const Tensor& x, Tensor& first_group_out) const;
    Tensor scc_core(const Tensor& x) const;

    ModelConfig cfg_;
    ParamStore params_;
    ParamStore buffers_;
    bool training_ = true;

    // backbone
    ConvBn stem1_, stem2_, bblock1_, bblock2_;
    ProjConv bproj_;
    // shared cost-volume pre-convs
    ConvBn pre1_, pre2_;
    Head init_head_;
    // SLED
    std::vector<std::vector<ConvBn>> sled_groups_;  // residual blocks per scale
    std::vector<ConvBn> sled_trans_;                // post-pool transition convs
    std::vector<ConvBn> sled_match_;                // decoder 1x1x1 channel match
    std::vector<ConvBn> sled_fuse_;                 // decoder atrous residual blocks
    Head sled_head_;
    // SCC
    std::vector<ConvBn> scc_layers_;
    Head scc_head_;
    // HG
    std::vector<Hourglass> hg_stages_;
};

// Total trainable scalars for a config (fresh registry walk).
std::int64_t count_parameters(const ModelConfig& config);

}  // namespace sled
