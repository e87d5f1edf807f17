#include "sled/model.hpp"

#include <cstdio>
#include <sstream>

#include "sled/errors.hpp"

namespace sled {

std::string regularizer_token(Regularizer r) {
    switch (r) {
        case Regularizer::SLED: return "sled";
        case Regularizer::SCC: return "scc";
        case Regularizer::HG1: return "hg1";
        case Regularizer::HG2: return "hg2";
        case Regularizer::HG3: return "hg3";
    }
    return "?";
}

std::string regularizer_display(Regularizer r) {
    switch (r) {
        case Regularizer::SLED: return "SLED-Net";
        case Regularizer::SCC: return "SCC-Net";
        case Regularizer::HG1: return "1HG";
        case Regularizer::HG2: return "2HGs";
        case Regularizer::HG3: return "3HGs";
    }
    return "?";
}

Regularizer regularizer_from_token(const std::string& token) {
    if (token == "sled") return Regularizer::SLED;
    if (token == "scc") return Regularizer::SCC;
    if (token == "hg1") return Regularizer::HG1;
    if (token == "hg2") return Regularizer::HG2;
    if (token == "hg3") return Regularizer::HG3;
    throw ParamError("unknown regularizer variant '" + token +
                     "' (expected sled|scc|hg1|hg2|hg3)");
}

int hourglass_count(Regularizer r) {
    switch (r) {
        case Regularizer::HG1: return 1;
        case Regularizer::HG2: return 2;
        case Regularizer::HG3: return 3;
        default: return 0;
    }
}

void ModelConfig::validate() const {
    if (max_disp <= 0 || max_disp % 4 != 0)
        throw ParamError("max_disp must be a positive multiple of 4, got " +
                         std::to_string(max_disp));
    if (feat_channels <= 0 || reg_channels <= 0)
        throw ParamError("feat_channels and reg_channels must be positive");
    if (atrous_dilation < 1) throw ParamError("atrous_dilation must be >= 1");
    int sum = 0;
    for (int b : encoder_block_layout) {
        if (b <= 0) throw ParamError("encoder_block_layout entries must be positive");
        sum += b;
    }
    if (regularizer == Regularizer::SLED && sum != 8)
        throw ParamError("encoder_block_layout must sum to 8 for the sled variant, got " +
                         std::to_string(sum));
}

std::string ModelConfig::digest() const {
    std::ostringstream os;
    os << "max_disp=" << max_disp << ";feat=" << feat_channels << ";reg=" << reg_channels
       << ";variant=" << regularizer_token(regularizer) << ";layout=";
    for (std::size_t i = 0; i < encoder_block_layout.size(); ++i)
        os << (i ? "," : "") << encoder_block_layout[i];
    os << ";dil=" << atrous_dilation << ";paper=" << (paper_scale ? 1 : 0);
    const std::string s = os.str();
    // FNV-1a 64-bit
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---- construction -----------------------------------------------------------

Tensor StereoModel::Head::apply(const Tensor& x, bool training) const {
    return proj.apply(conv.apply(x, training));
}

StereoModel::StereoModel(const ModelConfig& config, std::uint64_t seed) : cfg_(config) {
    cfg_.validate();
    Rng rng(seed);
    const int C = cfg_.eff_feat();
    const int F = 2 * C;       // backbone trunk width
    const int R = cfg_.eff_reg();
    const int R2 = 2 * R;      // regularizer width from 1/8 scale down
    const int dil = cfg_.atrous_dilation;

    auto convbn2 = [&](const std::string& n, int ci, int co, int stride) {
        return make_convbn(params_, buffers_, rng, n, 2, ci, co, 3, stride, 1, 1);
    };
    auto convbn3 = [&](const std::string& n, int ci, int co, int stride, bool relu_after = true) {
        return make_convbn(params_, buffers_, rng, n, 3, ci, co, 3, stride, 1, 1, relu_after);
    };
    auto head = [&](const std::string& n, int ci) {
        Head h;
        h.conv = convbn3(n + ".conv", ci, ci, 1);
        h.proj = make_proj(params_, rng, n + ".proj", 3, ci, 1, 3, 1);
        return h;
    };

    // Siamese backbone: two stride-2 stems to 1/4 scale, two residual blocks,
    // 1x1 projection to the feature width.
    stem1_ = convbn2("backbone.stem1", 3, F, 2);
    stem2_ = convbn2("backbone.stem2", F, F, 2);
    bblock1_ = convbn2("backbone.block1", F, F, 1);
    bblock2_ = convbn2("backbone.block2", F, F, 1);
    bproj_ = make_proj(params_, rng, "backbone.proj", 2, F, C, 1, 0);

    // Cost-volume pre-convs shared by every regularizer variant.
    pre1_ = convbn3("reg.pre1", 2 * C, R, 1);
    pre2_ = convbn3("reg.pre2", R, R, 1);
    init_head_ = head("head.initial", R);

    switch (cfg_.regularizer) {
        case Regularizer::SLED: {
            const int widths[4] = {R, R2, R2, R2};
            for (int s = 0; s < 4; ++s) {
                std::vector<ConvBn> group;
                for (int b = 0; b < cfg_.encoder_block_layout[static_cast<std::size_t>(s)]; ++b)
                    group.push_back(convbn3("sled.enc" + std::to_string(s) + ".block" +
                                                std::to_string(b),
                                            widths[s], widths[s], 1));
                sled_groups_.push_back(std::move(group));
                if (s < 3)
                    sled_trans_.push_back(convbn3("sled.trans" + std::to_string(s), widths[s],
                                                  widths[s + 1], 1));
            }
            const int dec_in[3] = {R2, R2, R2};
            const int dec_out[3] = {R2, R2, R};
            for (int s = 0; s < 3; ++s) {
                sled_match_.push_back(make_convbn(params_, buffers_, rng,
                                                  "sled.dec" + std::to_string(s) + ".match", 3,
                                                  dec_in[s], dec_out[s], 1, 1, 0, 1));
                sled_fuse_.push_back(make_convbn(params_, buffers_, rng,
                                                 "sled.dec" + std::to_string(s) + ".fuse", 3,
                                                 dec_out[s], dec_out[s], 3, 1, dil, dil));
            }
            sled_head_ = head("head.refined", R);
            break;
        }
        case Regularizer::SCC: {
            for (int i = 0; i < 4; ++i)
                scc_layers_.push_back(convbn3("scc.layer" + std::to_string(i), R, R, 1));
            scc_head_ = head("head.refined", R);
            break;
        }
        default: {
            const int k = hourglass_count(cfg_.regularizer);
            for (int s = 0; s < k; ++s) {
                Hourglass hg;
                const std::string base = "hg.stage" + std::to_string(s);
                const int enc_in[4] = {R, R2, R2, R2};
                const int enc_out[4] = {R2, R2, R2, R2};
                for (int i = 0; i < 4; ++i)
                    hg.enc.push_back(convbn3(base + ".enc" + std::to_string(i), enc_in[i],
                                             enc_out[i], 2));
                const int dec_in[4] = {R2, R, R, R};
                const int dec_out[4] = {R, R, R, R};
                for (int i = 0; i < 4; ++i)
                    hg.dec.push_back(convbn3(base + ".dec" + std::to_string(i), dec_in[i],
                                             dec_out[i], 1));
                hg.head = head(base + ".head", R);
                hg_stages_.push_back(std::move(hg));
            }
            break;
        }
    }
}

int StereoModel::num_outputs() const {
    const int k = hourglass_count(cfg_.regularizer);
    return k > 0 ? k + 1 : 2;
}

// ---- forward pieces -----------------------------------------------------------

Tensor StereoModel::extract_features(const Tensor& image) const {
    if (image.rank() != 4 || image.dim(1) != 3)
        throw ShapeError("extract_features: expected [N,3,H,W], got " + shape_str(image.shape()));
    for (int axis : {2, 3}) {
        if (image.dim(axis) % 32 != 0)
            throw ShapeError(std::string("extract_features: ") + (axis == 2 ? "H" : "W") + " = " +
                             std::to_string(image.dim(axis)) + " must be divisible by 32");
    }
    Tensor x = stem1_.apply(image, training_);
    x = stem2_.apply(x, training_);
    x = residual_block(bblock1_, x, training_);
    x = residual_block(bblock2_, x, training_);
    return bproj_.apply(x);
}

Tensor StereoModel::build_cost_volume(const Tensor& fl, const Tensor& fr) const {
    if (fl.shape() != fr.shape())
        throw ShapeError("build_cost_volume: feature shapes differ, " + shape_str(fl.shape()) +
                         " vs " + shape_str(fr.shape()));
    const std::int64_t N = fl.dim(0), C = fl.dim(1), H = fl.dim(2), W = fl.dim(3);
    const std::int64_t D = cfg_.max_disp / 4;
    if (D > W)
        throw ParamError("build_cost_volume: max_disp/4 = " + std::to_string(D) +
                         " exceeds feature width " + std::to_string(W));

    Shape out_shape = {N, 2 * C, D, H, W};
    std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)), 0.0);
    const double* lp = fl.data().data();
    const double* rp = fr.data().data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t h = 0; h < H; ++h) {
                const double* lrow = lp + ((n * C + c) * H + h) * W;
                const double* rrow = rp + ((n * C + c) * H + h) * W;
                for (std::int64_t d = 0; d < D; ++d) {
                    double* lo = out.data() + ((((n * 2 * C) + c) * D + d) * H + h) * W;
                    double* ro = out.data() + ((((n * 2 * C) + C + c) * D + d) * H + h) * W;
                    for (std::int64_t w = 0; w < W; ++w) {
                        lo[w] = lrow[w];
                        if (w - d >= 0) ro[w] = rrow[w - d];
                    }
                }
            }

    return custom_op(out_shape, std::move(out), {fl, fr},
                     [N, C, H, W, D](const std::vector<double>& adj,
                                     const std::vector<std::vector<double>*>& gins) {
                         for (std::int64_t n = 0; n < N; ++n)
                             for (std::int64_t c = 0; c < C; ++c)
                                 for (std::int64_t d = 0; d < D; ++d)
                                     for (std::int64_t h = 0; h < H; ++h) {
                                         const double* la =
                                             adj.data() + ((((n * 2 * C) + c) * D + d) * H + h) * W;
                                         const double* ra =
                                             adj.data() +
                                             ((((n * 2 * C) + C + c) * D + d) * H + h) * W;
                                         if (gins[0]) {
                                             double* gl =
                                                 gins[0]->data() + ((n * C + c) * H + h) * W;
                                             for (std::int64_t w = 0; w < W; ++w) gl[w] += la[w];
                                         }
                                         if (gins[1]) {
                                             double* gr =
                                                 gins[1]->data() + ((n * C + c) * H + h) * W;
                                             for (std::int64_t w = d; w < W; ++w)
                                                 gr[w - d] += ra[w];
                                         }
                                     }
                     });
}

Tensor StereoModel::sled_core(const Tensor& x, Tensor& first_group_out) const {
    for (int axis = 2; axis < 5; ++axis) {
        if (x.dim(axis) % 8 != 0)
            throw ShapeError("sled regularizer: volume axis " + std::to_string(axis) +
                             " extent " + std::to_string(x.dim(axis)) +
                             " must be divisible by 8 (three halvings)");
    }
    // encoder: scale groups at 1/4, 1/8, 1/16, 1/32 with avg-pool(2,2) between
    std::vector<Tensor> scale_out;
    Tensor cur = x;
    for (int s = 0; s < 4; ++s) {
        if (s > 0) {
            cur = avg_pool(cur, 2, 2);
            cur = sled_trans_[static_cast<std::size_t>(s - 1)].apply(cur, training_);
        }
        for (const auto& blk : sled_groups_[static_cast<std::size_t>(s)])
            cur = residual_block(blk, cur, training_);
        scale_out.push_back(cur);
    }
    first_group_out = scale_out[0];

    // decoder: 3 stages of trilinear x2 -> channel match -> skip sum -> atrous
    // residual fusion
    Tensor d = scale_out[3];
    for (int s = 0; s < 3; ++s) {
        d = trilinear_upsample(d, 2);
        d = sled_match_[static_cast<std::size_t>(s)].apply(d, training_);
        d = add_skip(d, scale_out[static_cast<std::size_t>(2 - s)]);
        d = residual_block(sled_fuse_[static_cast<std::size_t>(s)], d, training_);
    }
    return d;
}

Tensor StereoModel::scc_core(const Tensor& x) const {
    Tensor cur = x;
    for (const auto& layer : scc_layers_) cur = layer.apply(cur, training_);
    return cur;
}

std::vector<Tensor> StereoModel::regularize(const Tensor& volume) const {
    if (volume.rank() != 5 || volume.dim(1) != 2 * cfg_.eff_feat())
        throw ShapeError("regularize: expected volume [N," +
                         std::to_string(2 * cfg_.eff_feat()) + ",D,H,W], got " +
                         shape_str(volume.shape()));
    Tensor x = pre1_.apply(volume, training_);
    x = pre2_.apply(x, training_);

    std::vector<Tensor> costs;
    switch (cfg_.regularizer) {
        case Regularizer::SLED: {
            Tensor first_group;
            Tensor refined = sled_core(x, first_group);
            costs.push_back(init_head_.apply(first_group, training_));
            costs.push_back(sled_head_.apply(refined, training_));
            break;
        }
        case Regularizer::SCC: {
            costs.push_back(init_head_.apply(x, training_));
            costs.push_back(scc_head_.apply(scc_core(x), training_));
            break;
        }
        default: {
            for (int axis = 2; axis < 5; ++axis) {
                if (x.dim(axis) % 16 != 0)
                    throw ShapeError("hourglass regularizer: volume axis " +
                                     std::to_string(axis) + " extent " +
                                     std::to_string(x.dim(axis)) +
                                     " must be divisible by 16 (four halvings)");
            }
            costs.push_back(init_head_.apply(x, training_));
            Tensor cur = x;
            for (const auto& hg : hg_stages_) {
                for (const auto& enc : hg.enc) cur = enc.apply(cur, training_);
                for (const auto& dec : hg.dec) {
                    cur = trilinear_upsample(cur, 2);
                    cur = dec.apply(cur, training_);
                }
                costs.push_back(hg.head.apply(cur, training_));
            }
            break;
        }
    }
    return costs;
}

Tensor StereoModel::regress_disparity(const Tensor& cost) const {
    if (cost.rank() != 5 || cost.dim(1) != 1)
        throw ShapeError("regress_disparity: expected [N,1,D/4,H/4,W/4], got " +
                         shape_str(cost.shape()));
    if (cfg_.max_disp != 4 * cost.dim(2))
        throw ParamError("regress_disparity: max_disp " + std::to_string(cfg_.max_disp) +
                         " != 4 x cost disparity extent " + std::to_string(cost.dim(2)));
    Tensor up = trilinear_upsample(cost, 4);
    const std::int64_t N = up.dim(0), D = up.dim(2), H = up.dim(3), W = up.dim(4);
    Tensor logits = reshape(scale(up, -1.0), {N, D, H, W});
    Tensor probs = softmax_axis(logits, 1);
    Tensor disp = index_expectation(probs, 1);

    // The exact expectation under strictly positive probabilities lies inside
    // (0, D-1); summation round-off can spill a few ulps past either end, so
    // trim it. The clamp never binds in exact arithmetic, hence the gradient
    // passes through unchanged.
    std::vector<double> vals = disp.data();
    const double hi = static_cast<double>(D - 1);
    for (auto& v : vals) v = std::min(std::max(v, 0.0), hi);
    return custom_op(disp.shape(), std::move(vals), {disp},
                     [](const std::vector<double>& out_adjoint,
                        const std::vector<std::vector<double>*>& input_adjoints) {
                         if (!input_adjoints[0]) return;
                         for (std::size_t i = 0; i < out_adjoint.size(); ++i)
                             (*input_adjoints[0])[i] += out_adjoint[i];
                     });
}

ModelOutputs StereoModel::forward(const Tensor& left, const Tensor& right) const {
    if (!left.defined() || !right.defined() || left.shape() != right.shape())
        throw ShapeError("forward: left/right images must share a shape");
    const int need = hourglass_count(cfg_.regularizer) > 0 ? 64 : 32;
    for (int axis : {2, 3}) {
        if (left.dim(axis) % need != 0)
            throw ShapeError(std::string("forward: ") + (axis == 2 ? "H" : "W") + " = " +
                             std::to_string(left.dim(axis)) + " must be divisible by " +
                             std::to_string(need) + " for the " +
                             regularizer_token(cfg_.regularizer) + " variant");
    }
    Tensor fl = extract_features(left);
    Tensor fr = extract_features(right);
    Tensor volume = build_cost_volume(fl, fr);
    std::vector<Tensor> costs = regularize(volume);

    ModelOutputs out;
    for (const auto& c : costs) out.all.push_back(regress_disparity(c));
    out.initial = out.all.front();
    out.refined = out.all.back();
    return out;
}

std::int64_t count_parameters(const ModelConfig& config) {
    return StereoModel(config, 0).count_parameters();
}

}  // namespace sled
