#include "sled/train.hpp"

#include <cmath>

#include "sled/errors.hpp"
#include "sled/metrics.hpp"

namespace sled {

void TrainConfig::validate() const {
    if (lr_initial <= 0) throw ParamError("lr_initial must be > 0");
    if (pretrain_epochs <= 0) throw ParamError("pretrain_epochs must be > 0");
    if (finetune_lr_schedule.empty()) throw ParamError("finetune_lr_schedule must be non-empty");
    for (const auto& [lr, epochs] : finetune_lr_schedule) {
        if (lr <= 0) throw ParamError("finetune schedule learning rates must be > 0");
        if (epochs <= 0) throw ParamError("finetune schedule epoch counts must be > 0");
    }
    if (batch_size < 1) throw ParamError("batch_size must be >= 1");
    for (double w : loss_weights)
        if (w < 0) throw ParamError("loss_weights must be non-negative");
}

int TrainConfig::total_epochs() const {
    if (mode == TrainMode::Pretrain) return pretrain_epochs;
    int total = 0;
    for (const auto& [lr, epochs] : finetune_lr_schedule) total += epochs;
    return total;
}

double TrainConfig::lr_at(int epoch) const {
    if (mode == TrainMode::Pretrain) return lr_initial;
    int cum = 0;
    for (const auto& [lr, epochs] : finetune_lr_schedule) {
        cum += epochs;
        if (epoch < cum) return lr;
    }
    return finetune_lr_schedule.back().first;
}

Tensor total_loss(const std::vector<Tensor>& outputs, const Tensor& gt, const Tensor& mask,
                  const std::vector<double>& weights) {
    if (outputs.empty()) throw ParamError("total_loss: no outputs");
    if (weights.size() != outputs.size())
        throw ParamError("total_loss: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(outputs.size()) + " supervised outputs");
    Tensor acc = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < outputs.size(); ++i)
        acc = add(acc, scale(smooth_l1(outputs[i], gt, mask), weights[i]));
    return acc;
}

std::vector<std::uint8_t> loss_mask(const std::vector<double>& gt,
                                    const std::vector<std::uint8_t>& valid, int max_disp) {
    if (gt.size() != valid.size()) throw ShapeError("loss_mask: gt/valid size mismatch");
    std::vector<std::uint8_t> out(gt.size());
    // zero disparity means "no measurement" (KITTI convention), and anything
    // at or above the model range cannot be regressed, so neither trains
    for (std::size_t i = 0; i < gt.size(); ++i)
        out[i] = valid[i] && gt[i] > 0.0 && gt[i] < static_cast<double>(max_disp) ? 1 : 0;
    return out;
}

Adam::Adam(ParamStore& params, double beta1, double beta2, double eps)
    : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, t] : params_.items()) {
        m_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    }
}

void Adam::zero_grads() { params_.zero_grads(); }

void Adam::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::size_t i = 0;
    for (const auto& [name, t] : params_.items()) {
        Tensor p = t;
        auto& m = m_[i];
        auto& v = v_[i];
        ++i;
        if (!p.has_grad()) continue;  // never touched by the loss
        const auto& g = p.grad();
        auto& vals = p.data();
        for (std::size_t k = 0; k < vals.size(); ++k) {
            m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
            v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
            vals[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps_);
        }
    }
}

std::vector<EpochLog> train(StereoModel& model, const std::vector<TrainSample>& dataset,
                            const TrainConfig& cfg,
                            const std::function<void(const EpochLog&)>& on_epoch) {
    cfg.validate();
    if (dataset.empty()) throw ParamError("train: empty dataset");
    std::vector<double> weights = cfg.loss_weights;
    if (weights.empty()) weights.assign(static_cast<std::size_t>(model.num_outputs()), 1.0);
    if (static_cast<int>(weights.size()) != model.num_outputs())
        throw ParamError("train: " + std::to_string(weights.size()) + " loss weights for " +
                         std::to_string(model.num_outputs()) + " supervised outputs");

    // per-sample ground-truth tensors and masks, built once
    struct Prepared {
        Tensor gt, mask;
        std::vector<std::uint8_t> eval_mask;
    };
    std::vector<Prepared> prep;
    for (const TrainSample& s : dataset) {
        if (!s.left.defined() || s.left.rank() != 4)
            throw ShapeError("train: samples must carry [1,3,H,W] images");
        const std::int64_t h = s.left.dim(2), w = s.left.dim(3);
        if (static_cast<std::int64_t>(s.gt.size()) != h * w)
            throw ShapeError("train: ground truth size does not match image " +
                             std::to_string(h) + "x" + std::to_string(w));
        Prepared p;
        p.eval_mask = loss_mask(s.gt, s.valid, model.config().max_disp);
        std::vector<double> maskd(p.eval_mask.begin(), p.eval_mask.end());
        p.gt = Tensor::from_data({1, h, w}, s.gt);
        p.mask = Tensor::from_data({1, h, w}, std::move(maskd));
        prep.push_back(std::move(p));
    }

    model.train();
    Adam opt(model.params());
    std::vector<EpochLog> log;
    const int epochs = cfg.total_epochs();
    for (int epoch = 0; epoch < epochs; ++epoch) {
        const double lr = cfg.lr_at(epoch);
        double loss_sum = 0.0, epe_sum = 0.0;
        std::size_t i = 0;
        while (i < dataset.size()) {
            const std::size_t batch_end =
                std::min(dataset.size(), i + static_cast<std::size_t>(cfg.batch_size));
            const double inv = 1.0 / static_cast<double>(batch_end - i);
            opt.zero_grads();
            for (; i < batch_end; ++i) {
                ModelOutputs out = model.forward(dataset[i].left, dataset[i].right);
                Tensor loss = total_loss(out.all, prep[i].gt, prep[i].mask, weights);
                const double lv = loss.item();
                if (!std::isfinite(lv))
                    throw TrainError("train: loss is not finite at epoch " +
                                     std::to_string(epoch));
                loss_sum += lv;
                epe_sum += end_point_error(out.refined.data(), prep[i].gt.data(),
                                           prep[i].eval_mask);
                backward(scale(loss, inv));
            }
            opt.step(lr);
        }
        EpochLog e;
        e.epoch = epoch;
        e.lr = lr;
        e.loss = loss_sum / static_cast<double>(dataset.size());
        e.epe = epe_sum / static_cast<double>(dataset.size());
        log.push_back(e);
        if (on_epoch) on_epoch(e);
    }
    return log;
}

}  // namespace sled
