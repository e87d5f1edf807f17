#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace sled {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One node of the tape. Nodes are created in execution order and carry a
// sequence number; backward() visits reachable nodes in strictly decreasing
// sequence order, so adjoints flow in exact reverse execution order.
//
// `adjoint` is transient scratch for a single backward() call; `grad` is the
// persistent accumulator. Keeping them separate makes a second backward()
// over the same tape add the same contributions again (accumulation
// semantics) instead of compounding.
struct Node {
    Shape shape;
    std::vector<double> value;
    bool requires_grad = false;
    std::vector<double> grad;     // persistent, lazily sized
    std::vector<double> adjoint;  // scratch during backward
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    // Pulls this node's adjoint into the parents' adjoints.
    std::function<void(Node&)> pull;

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
};

}  // namespace detail

// Value-semantic handle onto a tape node. Copies alias the same storage;
// tensors are immutable once produced by an op except for gradient
// accumulation.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t dim(int axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }
    std::int64_t numel() const { return node_->numel(); }

    std::vector<double>& data() { return node_->value; }
    const std::vector<double>& data() const { return node_->value; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool rg);

    // Lazily sized to match the data. Only meaningful if requires_grad.
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    void zero_grad();

    // Value of a scalar (rank-0 or single-element) tensor.
    double item() const;

    detail::Node* node() const { return node_.get(); }
    std::shared_ptr<detail::Node> node_ptr() const { return node_; }

    static Tensor wrap(std::shared_ptr<detail::Node> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

private:
    std::shared_ptr<detail::Node> node_;
};

bool all_finite(const Tensor& t);

// ---- op surface -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor sum(const Tensor& a);  // -> scalar
Tensor reshape(const Tensor& a, const Shape& shape);

// N-d cross-correlation over 2 or 3 spatial axes. Input [N,Ci,*S], weight
// [Co,Ci,*K], optional bias [Co]; stride/padding/dilation apply to every
// spatial axis. Output extent = floor((in + 2p - d*(k-1) - 1)/stride) + 1.
Tensor conv(const Tensor& input, const Tensor& weight, const Tensor& bias,
            int stride, int padding, int dilation);

// Mean pooling with no padding; (in - window) must be divisible by stride.
Tensor avg_pool(const Tensor& input, int window, int stride);

// Corner-aligned trilinear upsampling of [N,C,D,H,W] by an integer scale.
Tensor trilinear_upsample(const Tensor& input, int scale);

// Batch normalization over all axes except the channel axis (1). In training
// mode batch statistics normalize and the running buffers are updated with
// the given momentum; in eval mode the running buffers normalize.
Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 Tensor running_mean, Tensor running_var, bool training,
                 double eps = 1e-5, double momentum = 0.1);

Tensor softmax_axis(const Tensor& input, int axis);

// Mean smooth-L1 over masked elements: 0.5 x^2 for |x| < 1, |x| - 0.5 outside.
Tensor smooth_l1(const Tensor& pred, const Tensor& target, const Tensor& mask);

// sum_i i * p[..., i, ...] along `axis`; the soft-argmin readout given
// softmaxed probabilities.
Tensor index_expectation(const Tensor& probs, int axis);

// Runs the tape backward from a scalar loss, accumulating into the grads of
// every reachable requires_grad tensor.
void backward(const Tensor& loss);

// Hook for building custom differentiable ops outside tensor-core (the cost
// volume lives in the model). `pull` receives the output adjoint and one
// adjoint pointer per input (null when that input does not need gradients).
using PullFn = std::function<void(const std::vector<double>& out_adjoint,
                                  const std::vector<std::vector<double>*>& input_adjoints)>;
Tensor custom_op(const Shape& out_shape, std::vector<double> out_value,
                 const std::vector<Tensor>& inputs, PullFn pull);

// ---- structure trace ------------------------------------------------------

// Execution-trace introspection: while enabled, ops append typed events as
// they run, so tests can count the structural pieces a forward pass actually
// executed (poolings, upsamplings, residual vs skip sums, conv strides).
namespace trace {

enum class Kind {
    Conv2d,
    Conv3d,
    AvgPool,
    Trilinear,
    ResidualAdd,
    SkipAdd,
    BatchNorm,
    Relu,
    Softmax,
};

struct Event {
    Kind kind;
    int stride = 1;
    int dilation = 1;
};

void clear();
void set_enabled(bool on);
bool enabled();
const std::vector<Event>& events();
void emit(Event e);
int count(Kind kind);
int count_conv_with_stride(int stride);

}  // namespace trace

// Element-wise sums tagged for the trace; numerically identical to add().
Tensor add_residual(const Tensor& a, const Tensor& b);
Tensor add_skip(const Tensor& a, const Tensor& b);

}  // namespace sled
