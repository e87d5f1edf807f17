// Training loop: smooth-L1 loss with intermediate supervision, Adam, fixed or
// stepped learning-rate schedules, per-epoch logging.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sled/model.hpp"
#include "sled/tensor.hpp"

namespace sled {

enum class TrainMode { Pretrain, Finetune };

struct TrainConfig {
    TrainMode mode = TrainMode::Pretrain;
    double lr_initial = 0.001;
    int pretrain_epochs = 20;
    // finetune: consecutive (lr, epoch-count) stages
    std::vector<std::pair<double, int>> finetune_lr_schedule = {{0.001, 600}, {0.0001, 400}};
    std::vector<double> loss_weights;  // empty -> all ones, sized to the model outputs
    int batch_size = 1;
    std::uint64_t seed = 0;

    void validate() const;     // throws ParamError
    int total_epochs() const;
    double lr_at(int epoch) const;  // 0-based epoch -> learning rate
};

// One training example, already tensor-shaped: images [1,3,H,W], ground truth
// [1,H,W], validity flags per pixel (row-major H*W).
struct TrainSample {
    Tensor left, right;
    std::vector<double> gt;
    std::vector<std::uint8_t> valid;
};

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
    double epe = 0.0;  // training EPE of the refined output
};

// sum_i weights[i] * smooth_l1(outputs[i], gt, mask); weights must match the
// output count.
Tensor total_loss(const std::vector<Tensor>& outputs, const Tensor& gt, const Tensor& mask,
                  const std::vector<double>& weights);

// Pixels participating in loss/metrics: valid ground truth below max_disp.
std::vector<std::uint8_t> loss_mask(const std::vector<double>& gt,
                                    const std::vector<std::uint8_t>& valid, int max_disp);

// Adam (0.9, 0.999, eps 1e-8), no weight decay. State is keyed by parameter
// order, so one optimizer must stay with one model.
class Adam {
public:
    explicit Adam(ParamStore& params, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8);
    void step(double lr);
    void zero_grads();

private:
    ParamStore& params_;
    double beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// Runs the full loop; returns the per-epoch log. Throws TrainError naming the
// epoch if the loss goes non-finite. `on_epoch` (optional) observes progress.
std::vector<EpochLog> train(StereoModel& model, const std::vector<TrainSample>& dataset,
                            const TrainConfig& cfg,
                            const std::function<void(const EpochLog&)>& on_epoch = nullptr);

}  // namespace sled
