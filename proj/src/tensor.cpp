#include "sled/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "sled/errors.hpp"

namespace sled {

namespace {

std::uint64_t& seq_counter() {
    thread_local std::uint64_t counter = 0;
    return counter;
}

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->seq = ++seq_counter();
    return n;
}

bool any_requires_grad(const std::vector<Tensor>& ts) {
    for (const auto& t : ts)
        if (t.defined() && t.requires_grad()) return true;
    return false;
}

// Adjoint of `t` if it participates in the current backward pass.
std::vector<double>* adj_of(const Tensor& t) {
    if (!t.defined() || !t.requires_grad()) return nullptr;
    return &t.node()->adjoint;
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        std::ostringstream os;
        os << op << ": shape mismatch " << shape_str(a.shape()) << " vs "
           << shape_str(b.shape());
        throw ShapeError(os.str());
    }
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    auto n = make_node(shape, std::vector<double>(static_cast<std::size_t>(shape_numel(shape)), value));
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        std::ostringstream os;
        os << "from_data: shape " << shape_str(shape) << " wants " << shape_numel(shape)
           << " values, got " << data.size();
        throw ShapeError(os.str());
    }
    auto n = make_node(shape, std::move(data));
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

void Tensor::set_requires_grad(bool rg) { node_->requires_grad = rg; }

std::vector<double>& Tensor::grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (numel() != 1) throw ParamError("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
}

bool all_finite(const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

// ---- trace ------------------------------------------------------------------

namespace trace {

namespace {
struct State {
    bool enabled = false;
    std::vector<Event> events;
};
State& state() {
    thread_local State s;
    return s;
}
}  // namespace

void clear() { state().events.clear(); }
void set_enabled(bool on) { state().enabled = on; }
bool enabled() { return state().enabled; }
const std::vector<Event>& events() { return state().events; }

void emit(Event e) {
    if (state().enabled) state().events.push_back(e);
}

int count(Kind kind) {
    int n = 0;
    for (const auto& e : state().events)
        if (e.kind == kind) ++n;
    return n;
}

int count_conv_with_stride(int stride) {
    int n = 0;
    for (const auto& e : state().events)
        if ((e.kind == Kind::Conv2d || e.kind == Kind::Conv3d) && e.stride == stride) ++n;
    return n;
}

}  // namespace trace

// ---- elementwise ops --------------------------------------------------------

namespace {

Tensor binary_op(const char* name, const Tensor& a, const Tensor& b,
                 std::vector<double> out,
                 std::function<void(detail::Node&, detail::Node*, detail::Node*)> pull) {
    auto n = make_node(a.shape(), std::move(out));
    if (a.requires_grad() || b.requires_grad()) {
        n->requires_grad = true;
        n->parents = {a.node_ptr(), b.node_ptr()};
        auto* pa = a.node();
        auto* pb = b.node();
        n->pull = [pull, pa, pb](detail::Node& self) { pull(self, pa, pb); };
    }
    (void)name;
    return Tensor::wrap(std::move(n));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return binary_op("add", a, b, std::move(out),
                     [](detail::Node& self, detail::Node* pa, detail::Node* pb) {
                         if (pa->requires_grad)
                             for (std::size_t i = 0; i < self.adjoint.size(); ++i)
                                 pa->adjoint[i] += self.adjoint[i];
                         if (pb->requires_grad)
                             for (std::size_t i = 0; i < self.adjoint.size(); ++i)
                                 pb->adjoint[i] += self.adjoint[i];
                     });
}

Tensor add_residual(const Tensor& a, const Tensor& b) {
    trace::emit({trace::Kind::ResidualAdd});
    return add(a, b);
}

Tensor add_skip(const Tensor& a, const Tensor& b) {
    trace::emit({trace::Kind::SkipAdd});
    return add(a, b);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return binary_op("sub", a, b, std::move(out),
                     [](detail::Node& self, detail::Node* pa, detail::Node* pb) {
                         if (pa->requires_grad)
                             for (std::size_t i = 0; i < self.adjoint.size(); ++i)
                                 pa->adjoint[i] += self.adjoint[i];
                         if (pb->requires_grad)
                             for (std::size_t i = 0; i < self.adjoint.size(); ++i)
                                 pb->adjoint[i] -= self.adjoint[i];
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return binary_op("mul", a, b, std::move(out),
                     [](detail::Node& self, detail::Node* pa, detail::Node* pb) {
                         if (pa->requires_grad)
                             for (std::size_t i = 0; i < self.adjoint.size(); ++i)
                                 pa->adjoint[i] += self.adjoint[i] * pb->value[i];
                         if (pb->requires_grad)
                             for (std::size_t i = 0; i < self.adjoint.size(); ++i)
                                 pb->adjoint[i] += self.adjoint[i] * pa->value[i];
                     });
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    auto n = make_node(a.shape(), std::move(out));
    if (a.requires_grad()) {
        n->requires_grad = true;
        n->parents = {a.node_ptr()};
        auto* pa = a.node();
        n->pull = [pa, s](detail::Node& self) {
            for (std::size_t i = 0; i < self.adjoint.size(); ++i)
                pa->adjoint[i] += self.adjoint[i] * s;
        };
    }
    return Tensor::wrap(std::move(n));
}

Tensor relu(const Tensor& a) {
    trace::emit({trace::Kind::Relu});
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    auto n = make_node(a.shape(), std::move(out));
    if (a.requires_grad()) {
        n->requires_grad = true;
        n->parents = {a.node_ptr()};
        auto* pa = a.node();
        n->pull = [pa](detail::Node& self) {
            for (std::size_t i = 0; i < self.adjoint.size(); ++i)
                if (pa->value[i] > 0.0) pa->adjoint[i] += self.adjoint[i];
        };
    }
    return Tensor::wrap(std::move(n));
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    auto n = make_node({1}, {acc});
    if (a.requires_grad()) {
        n->requires_grad = true;
        n->parents = {a.node_ptr()};
        auto* pa = a.node();
        n->pull = [pa](detail::Node& self) {
            const double g = self.adjoint[0];
            for (std::size_t i = 0; i < pa->adjoint.size(); ++i) pa->adjoint[i] += g;
        };
    }
    return Tensor::wrap(std::move(n));
}

Tensor reshape(const Tensor& a, const Shape& shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    auto n = make_node(shape, a.data());
    if (a.requires_grad()) {
        n->requires_grad = true;
        n->parents = {a.node_ptr()};
        auto* pa = a.node();
        n->pull = [pa](detail::Node& self) {
            for (std::size_t i = 0; i < self.adjoint.size(); ++i)
                pa->adjoint[i] += self.adjoint[i];
        };
    }
    return Tensor::wrap(std::move(n));
}

// ---- convolution ------------------------------------------------------------

namespace {

// Both 2-d and 3-d convolutions run through one 3-d kernel; 2-d inputs get a
// dummy leading spatial axis of extent 1.
struct ConvPlan {
    std::int64_t n, ci, co;
    std::int64_t iz, iy, ix;
    std::int64_t kz, ky, kx;
    std::int64_t oz, oy, ox;
    int stride, pad, dil;
    int pad_z;  // dummy depth axis of a 2-d conv is never padded
    int spatial_rank;
};

std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, int s, int p, int d) {
    return (in + 2 * p - d * (k - 1) - 1) / s + 1;
}

ConvPlan plan_conv(const Tensor& input, const Tensor& weight, const Tensor& bias,
                   int stride, int padding, int dilation) {
    const int rank = input.rank();
    if (rank != 4 && rank != 5)
        throw ShapeError("conv: input must be [N,C,H,W] or [N,C,D,H,W], got " +
                         shape_str(input.shape()));
    if (weight.rank() != rank)
        throw ShapeError("conv: weight rank " + std::to_string(weight.rank()) +
                         " does not match input rank " + std::to_string(rank));
    if (input.dim(1) != weight.dim(1))
        throw ShapeError("conv: input channels (axis 1) = " + std::to_string(input.dim(1)) +
                         " but weight expects " + std::to_string(weight.dim(1)));
    if (stride < 1) throw ParamError("conv: stride must be >= 1");
    if (dilation < 1) throw ParamError("conv: dilation must be >= 1");
    if (padding < 0) throw ParamError("conv: padding must be >= 0");

    ConvPlan p;
    p.spatial_rank = rank - 2;
    p.n = input.dim(0);
    p.ci = input.dim(1);
    p.co = weight.dim(0);
    p.stride = stride;
    p.pad = padding;
    p.dil = dilation;
    p.pad_z = rank == 5 ? padding : 0;
    if (rank == 5) {
        p.iz = input.dim(2); p.iy = input.dim(3); p.ix = input.dim(4);
        p.kz = weight.dim(2); p.ky = weight.dim(3); p.kx = weight.dim(4);
    } else {
        p.iz = 1; p.iy = input.dim(2); p.ix = input.dim(3);
        p.kz = 1; p.ky = weight.dim(2); p.kx = weight.dim(3);
    }
    p.oz = conv_out_extent(p.iz, p.kz, stride, p.pad_z, dilation);
    p.oy = conv_out_extent(p.iy, p.ky, stride, padding, dilation);
    p.ox = conv_out_extent(p.ix, p.kx, stride, padding, dilation);
    const char* axis_names5[] = {"D", "H", "W"};
    const char* axis_names4[] = {"", "H", "W"};
    const std::int64_t outs[] = {p.oz, p.oy, p.ox};
    for (int a = rank == 5 ? 0 : 1; a < 3; ++a) {
        if (outs[a] < 1)
            throw ShapeError(std::string("conv: kernel does not fit padded input along axis ") +
                             (rank == 5 ? axis_names5[a] : axis_names4[a]));
    }
    if (bias.defined()) {
        if (bias.rank() != 1 || bias.dim(0) != p.co)
            throw ShapeError("conv: bias must be [" + std::to_string(p.co) + "], got " +
                             shape_str(bias.shape()));
    }
    return p;
}

// Output index range [lo,hi) for which o*stride - pad + tap*dil lands inside
// [0, in).
inline void tap_range(std::int64_t out, std::int64_t in, int stride, int pad,
                      std::int64_t tap_off, std::int64_t& lo, std::int64_t& hi) {
    const std::int64_t shift = tap_off - pad;  // input index = o*stride + shift
    lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
    const std::int64_t last = in - 1 - shift;
    hi = last < 0 ? 0 : std::min(out, last / stride + 1);
    if (lo > hi) lo = hi;
}

void conv_forward(const ConvPlan& p, const double* in, const double* w,
                  const double* bias, double* out) {
    const std::int64_t in_cstride = p.iz * p.iy * p.ix;
    const std::int64_t out_cstride = p.oz * p.oy * p.ox;
    const std::int64_t w_cstride = p.kz * p.ky * p.kx;
    for (std::int64_t n = 0; n < p.n; ++n) {
        for (std::int64_t co = 0; co < p.co; ++co) {
            double* outp = out + (n * p.co + co) * out_cstride;
            if (bias) {
                const double b = bias[co];
                for (std::int64_t i = 0; i < out_cstride; ++i) outp[i] = b;
            }
            for (std::int64_t ci = 0; ci < p.ci; ++ci) {
                const double* inp = in + (n * p.ci + ci) * in_cstride;
                const double* wp = w + (co * p.ci + ci) * w_cstride;
                for (std::int64_t kz = 0; kz < p.kz; ++kz)
                    for (std::int64_t ky = 0; ky < p.ky; ++ky)
                        for (std::int64_t kx = 0; kx < p.kx; ++kx) {
                            const double wv = wp[(kz * p.ky + ky) * p.kx + kx];
                            std::int64_t zlo, zhi, ylo, yhi, xlo, xhi;
                            tap_range(p.oz, p.iz, p.stride, p.pad_z, kz * p.dil, zlo, zhi);
                            tap_range(p.oy, p.iy, p.stride, p.pad, ky * p.dil, ylo, yhi);
                            tap_range(p.ox, p.ix, p.stride, p.pad, kx * p.dil, xlo, xhi);
                            const std::int64_t xshift = kx * p.dil - p.pad;
                            for (std::int64_t zo = zlo; zo < zhi; ++zo) {
                                const std::int64_t zi = zo * p.stride - p.pad_z + kz * p.dil;
                                for (std::int64_t yo = ylo; yo < yhi; ++yo) {
                                    const std::int64_t yi = yo * p.stride - p.pad + ky * p.dil;
                                    const double* irow = inp + (zi * p.iy + yi) * p.ix;
                                    double* orow = outp + (zo * p.oy + yo) * p.ox;
                                    if (p.stride == 1) {
                                        const double* ir = irow + xshift;
                                        for (std::int64_t xo = xlo; xo < xhi; ++xo)
                                            orow[xo] += wv * ir[xo];
                                    } else {
                                        for (std::int64_t xo = xlo; xo < xhi; ++xo)
                                            orow[xo] += wv * irow[xo * p.stride + xshift];
                                    }
                                }
                            }
                        }
            }
        }
    }
}

void conv_backward_input(const ConvPlan& p, const double* adj_out, const double* w,
                         double* adj_in) {
    const std::int64_t in_cstride = p.iz * p.iy * p.ix;
    const std::int64_t out_cstride = p.oz * p.oy * p.ox;
    const std::int64_t w_cstride = p.kz * p.ky * p.kx;
    for (std::int64_t n = 0; n < p.n; ++n) {
        for (std::int64_t co = 0; co < p.co; ++co) {
            const double* ap = adj_out + (n * p.co + co) * out_cstride;
            for (std::int64_t ci = 0; ci < p.ci; ++ci) {
                double* gp = adj_in + (n * p.ci + ci) * in_cstride;
                const double* wp = w + (co * p.ci + ci) * w_cstride;
                for (std::int64_t kz = 0; kz < p.kz; ++kz)
                    for (std::int64_t ky = 0; ky < p.ky; ++ky)
                        for (std::int64_t kx = 0; kx < p.kx; ++kx) {
                            const double wv = wp[(kz * p.ky + ky) * p.kx + kx];
                            std::int64_t zlo, zhi, ylo, yhi, xlo, xhi;
                            tap_range(p.oz, p.iz, p.stride, p.pad_z, kz * p.dil, zlo, zhi);
                            tap_range(p.oy, p.iy, p.stride, p.pad, ky * p.dil, ylo, yhi);
                            tap_range(p.ox, p.ix, p.stride, p.pad, kx * p.dil, xlo, xhi);
                            const std::int64_t xshift = kx * p.dil - p.pad;
                            for (std::int64_t zo = zlo; zo < zhi; ++zo) {
                                const std::int64_t zi = zo * p.stride - p.pad_z + kz * p.dil;
                                for (std::int64_t yo = ylo; yo < yhi; ++yo) {
                                    const std::int64_t yi = yo * p.stride - p.pad + ky * p.dil;
                                    double* grow = gp + (zi * p.iy + yi) * p.ix;
                                    const double* arow = ap + (zo * p.oy + yo) * p.ox;
                                    if (p.stride == 1) {
                                        double* gr = grow + xshift;
                                        for (std::int64_t xo = xlo; xo < xhi; ++xo)
                                            gr[xo] += wv * arow[xo];
                                    } else {
                                        for (std::int64_t xo = xlo; xo < xhi; ++xo)
                                            grow[xo * p.stride + xshift] += wv * arow[xo];
                                    }
                                }
                            }
                        }
            }
        }
    }
}

void conv_backward_weight(const ConvPlan& p, const double* adj_out, const double* in,
                          double* adj_w) {
    const std::int64_t in_cstride = p.iz * p.iy * p.ix;
    const std::int64_t out_cstride = p.oz * p.oy * p.ox;
    const std::int64_t w_cstride = p.kz * p.ky * p.kx;
    for (std::int64_t co = 0; co < p.co; ++co) {
        for (std::int64_t ci = 0; ci < p.ci; ++ci) {
            double* gw = adj_w + (co * p.ci + ci) * w_cstride;
            for (std::int64_t kz = 0; kz < p.kz; ++kz)
                for (std::int64_t ky = 0; ky < p.ky; ++ky)
                    for (std::int64_t kx = 0; kx < p.kx; ++kx) {
                        std::int64_t zlo, zhi, ylo, yhi, xlo, xhi;
                        tap_range(p.oz, p.iz, p.stride, p.pad_z, kz * p.dil, zlo, zhi);
                        tap_range(p.oy, p.iy, p.stride, p.pad, ky * p.dil, ylo, yhi);
                        tap_range(p.ox, p.ix, p.stride, p.pad, kx * p.dil, xlo, xhi);
                        const std::int64_t xshift = kx * p.dil - p.pad;
                        double acc = 0.0;
                        for (std::int64_t n = 0; n < p.n; ++n) {
                            const double* ap = adj_out + (n * p.co + co) * out_cstride;
                            const double* inp = in + (n * p.ci + ci) * in_cstride;
                            for (std::int64_t zo = zlo; zo < zhi; ++zo) {
                                const std::int64_t zi = zo * p.stride - p.pad_z + kz * p.dil;
                                for (std::int64_t yo = ylo; yo < yhi; ++yo) {
                                    const std::int64_t yi = yo * p.stride - p.pad + ky * p.dil;
                                    const double* irow = inp + (zi * p.iy + yi) * p.ix;
                                    const double* arow = ap + (zo * p.oy + yo) * p.ox;
                                    if (p.stride == 1) {
                                        const double* ir = irow + xshift;
                                        for (std::int64_t xo = xlo; xo < xhi; ++xo)
                                            acc += arow[xo] * ir[xo];
                                    } else {
                                        for (std::int64_t xo = xlo; xo < xhi; ++xo)
                                            acc += arow[xo] * irow[xo * p.stride + xshift];
                                    }
                                }
                            }
                        }
                        gw[(kz * p.ky + ky) * p.kx + kx] += acc;
                    }
        }
    }
}

}  // namespace

Tensor conv(const Tensor& input, const Tensor& weight, const Tensor& bias,
            int stride, int padding, int dilation) {
    const ConvPlan p = plan_conv(input, weight, bias, stride, padding, dilation);
    trace::emit({p.spatial_rank == 3 ? trace::Kind::Conv3d : trace::Kind::Conv2d,
                 stride, dilation});

    Shape out_shape;
    if (p.spatial_rank == 3)
        out_shape = {p.n, p.co, p.oz, p.oy, p.ox};
    else
        out_shape = {p.n, p.co, p.oy, p.ox};
    std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)), 0.0);
    conv_forward(p, input.data().data(), weight.data().data(),
                 bias.defined() ? bias.data().data() : nullptr, out.data());

    auto node = make_node(out_shape, std::move(out));
    std::vector<Tensor> ins = {input, weight};
    if (bias.defined()) ins.push_back(bias);
    if (any_requires_grad(ins)) {
        node->requires_grad = true;
        for (const auto& t : ins) node->parents.push_back(t.node_ptr());
        Tensor in_t = input, w_t = weight, b_t = bias;
        node->pull = [p, in_t, w_t, b_t](detail::Node& self) {
            if (auto* ga = adj_of(in_t))
                conv_backward_input(p, self.adjoint.data(), w_t.data().data(), ga->data());
            if (auto* gw = adj_of(w_t))
                conv_backward_weight(p, self.adjoint.data(), in_t.data().data(), gw->data());
            if (b_t.defined()) {
                if (auto* gb = adj_of(b_t)) {
                    const std::int64_t cs = p.oz * p.oy * p.ox;
                    for (std::int64_t n = 0; n < p.n; ++n)
                        for (std::int64_t co = 0; co < p.co; ++co) {
                            const double* row = self.adjoint.data() + (n * p.co + co) * cs;
                            double acc = 0.0;
                            for (std::int64_t i = 0; i < cs; ++i) acc += row[i];
                            (*gb)[static_cast<std::size_t>(co)] += acc;
                        }
                }
            }
        };
    }
    return Tensor::wrap(std::move(node));
}

// ---- average pooling ----------------------------------------------------------

Tensor avg_pool(const Tensor& input, int window, int stride) {
    const int rank = input.rank();
    if (rank < 3 || rank > 5)
        throw ShapeError("avg_pool: input must be [N,C,*spatial] with 1-3 spatial axes, got " +
                         shape_str(input.shape()));
    if (window < 1 || stride < 1) throw ParamError("avg_pool: window and stride must be >= 1");
    trace::emit({trace::Kind::AvgPool, stride});

    // Normalize to 3 spatial axes; missing leading axes become dummies of
    // extent 1 pooled with window 1.
    const std::int64_t n = input.dim(0), c = input.dim(1);
    std::int64_t in[3], win[3], st[3];
    const char* names[3] = {"D", "H", "W"};
    const int lead = 5 - rank;
    for (int a = 0; a < 3; ++a) {
        if (a < lead) {
            in[a] = 1;
            win[a] = 1;
            st[a] = 1;
        } else {
            in[a] = input.dim(2 + a - lead);
            win[a] = window;
            st[a] = stride;
        }
    }
    std::int64_t out[3];
    for (int a = 0; a < 3; ++a) {
        if (win[a] > in[a])
            throw ShapeError(std::string("avg_pool: window ") + std::to_string(win[a]) +
                             " exceeds input extent " + std::to_string(in[a]) + " along axis " +
                             names[a]);
        if ((in[a] - win[a]) % st[a] != 0)
            throw ShapeError(std::string("avg_pool: window does not cover axis ") + names[a] +
                             " evenly (extent " + std::to_string(in[a]) + ", window " +
                             std::to_string(win[a]) + ", stride " + std::to_string(st[a]) + ")");
        out[a] = (in[a] - win[a]) / st[a] + 1;
    }

    Shape out_shape = {n, c};
    for (int a = lead; a < 3; ++a) out_shape.push_back(out[a]);
    const double inv = 1.0 / static_cast<double>(win[0] * win[1] * win[2]);
    std::vector<double> ov(static_cast<std::size_t>(shape_numel(out_shape)), 0.0);
    const std::int64_t in_cs = in[0] * in[1] * in[2];
    const std::int64_t out_cs = out[0] * out[1] * out[2];
    const double* ip = input.data().data();
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        const double* slab = ip + nc * in_cs;
        double* oslab = ov.data() + nc * out_cs;
        for (std::int64_t z = 0; z < out[0]; ++z)
            for (std::int64_t y = 0; y < out[1]; ++y)
                for (std::int64_t x = 0; x < out[2]; ++x) {
                    double acc = 0.0;
                    for (std::int64_t dz = 0; dz < win[0]; ++dz)
                        for (std::int64_t dy = 0; dy < win[1]; ++dy) {
                            const double* row =
                                slab + ((z * st[0] + dz) * in[1] + y * st[1] + dy) * in[2] +
                                x * st[2];
                            for (std::int64_t dx = 0; dx < win[2]; ++dx) acc += row[dx];
                        }
                    oslab[(z * out[1] + y) * out[2] + x] = acc * inv;
                }
    }

    auto node = make_node(out_shape, std::move(ov));
    if (input.requires_grad()) {
        node->requires_grad = true;
        node->parents = {input.node_ptr()};
        auto* pi = input.node();
        std::int64_t in0 = in[0], in1 = in[1], in2 = in[2];
        std::int64_t o0 = out[0], o1 = out[1], o2 = out[2];
        std::int64_t w0 = win[0], w1 = win[1], w2 = win[2];
        std::int64_t s0 = st[0], s1 = st[1], s2 = st[2];
        std::int64_t slabs = n * c;
        node->pull = [=](detail::Node& self) {
            const std::int64_t in_cs2 = in0 * in1 * in2;
            const std::int64_t out_cs2 = o0 * o1 * o2;
            for (std::int64_t nc = 0; nc < slabs; ++nc) {
                double* gslab = pi->adjoint.data() + nc * in_cs2;
                const double* aslab = self.adjoint.data() + nc * out_cs2;
                for (std::int64_t z = 0; z < o0; ++z)
                    for (std::int64_t y = 0; y < o1; ++y)
                        for (std::int64_t x = 0; x < o2; ++x) {
                            const double g = aslab[(z * o1 + y) * o2 + x] * inv;
                            for (std::int64_t dz = 0; dz < w0; ++dz)
                                for (std::int64_t dy = 0; dy < w1; ++dy) {
                                    double* row = gslab +
                                                  ((z * s0 + dz) * in1 + y * s1 + dy) * in2 +
                                                  x * s2;
                                    for (std::int64_t dx = 0; dx < w2; ++dx) row[dx] += g;
                                }
                        }
            }
        };
    }
    return Tensor::wrap(std::move(node));
}

// ---- trilinear upsampling ------------------------------------------------------

namespace {

struct AxisMap {
    std::vector<std::int64_t> i0, i1;
    std::vector<double> frac;
};

// Corner-aligned: output index i samples input coordinate i*(m-1)/(M-1), so
// endpoints map to endpoints and scale 1 is the identity.
AxisMap axis_map(std::int64_t in, std::int64_t out) {
    AxisMap m;
    m.i0.resize(static_cast<std::size_t>(out));
    m.i1.resize(static_cast<std::size_t>(out));
    m.frac.resize(static_cast<std::size_t>(out));
    for (std::int64_t i = 0; i < out; ++i) {
        double pos = out > 1 ? static_cast<double>(i) * static_cast<double>(in - 1) /
                                   static_cast<double>(out - 1)
                             : 0.0;
        std::int64_t lo = static_cast<std::int64_t>(pos);
        if (lo > in - 1) lo = in - 1;
        std::int64_t hi = std::min(lo + 1, in - 1);
        m.i0[static_cast<std::size_t>(i)] = lo;
        m.i1[static_cast<std::size_t>(i)] = hi;
        m.frac[static_cast<std::size_t>(i)] = pos - static_cast<double>(lo);
    }
    return m;
}

}  // namespace

Tensor trilinear_upsample(const Tensor& input, int scale) {
    if (input.rank() != 5)
        throw ShapeError("trilinear_upsample: input must be [N,C,D,H,W], got " +
                         shape_str(input.shape()));
    if (scale < 1) throw ParamError("trilinear_upsample: scale must be >= 1");
    trace::emit({trace::Kind::Trilinear, scale});

    const std::int64_t n = input.dim(0), c = input.dim(1);
    const std::int64_t id = input.dim(2), ih = input.dim(3), iw = input.dim(4);
    const std::int64_t od = id * scale, oh = ih * scale, ow = iw * scale;
    const AxisMap md = axis_map(id, od), mh = axis_map(ih, oh), mw = axis_map(iw, ow);

    Shape out_shape = {n, c, od, oh, ow};
    std::vector<double> ov(static_cast<std::size_t>(shape_numel(out_shape)));
    const std::int64_t in_cs = id * ih * iw, out_cs = od * oh * ow;
    const double* ip = input.data().data();
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        const double* slab = ip + nc * in_cs;
        double* oslab = ov.data() + nc * out_cs;
        for (std::int64_t z = 0; z < od; ++z) {
            const std::int64_t z0 = md.i0[z], z1 = md.i1[z];
            const double fz = md.frac[z];
            for (std::int64_t y = 0; y < oh; ++y) {
                const std::int64_t y0 = mh.i0[y], y1 = mh.i1[y];
                const double fy = mh.frac[y];
                const double* r00 = slab + (z0 * ih + y0) * iw;
                const double* r01 = slab + (z0 * ih + y1) * iw;
                const double* r10 = slab + (z1 * ih + y0) * iw;
                const double* r11 = slab + (z1 * ih + y1) * iw;
                double* orow = oslab + (z * oh + y) * ow;
                for (std::int64_t x = 0; x < ow; ++x) {
                    const std::int64_t x0 = mw.i0[x], x1 = mw.i1[x];
                    const double fx = mw.frac[x];
                    const double v00 = r00[x0] + fx * (r00[x1] - r00[x0]);
                    const double v01 = r01[x0] + fx * (r01[x1] - r01[x0]);
                    const double v10 = r10[x0] + fx * (r10[x1] - r10[x0]);
                    const double v11 = r11[x0] + fx * (r11[x1] - r11[x0]);
                    const double v0 = v00 + fy * (v01 - v00);
                    const double v1 = v10 + fy * (v11 - v10);
                    orow[x] = v0 + fz * (v1 - v0);
                }
            }
        }
    }

    auto node = make_node(out_shape, std::move(ov));
    if (input.requires_grad()) {
        node->requires_grad = true;
        node->parents = {input.node_ptr()};
        auto* pi = input.node();
        std::int64_t slabs = n * c;
        node->pull = [pi, md, mh, mw, slabs, in_cs, out_cs, id, ih, iw, od, oh,
                      ow](detail::Node& self) {
            for (std::int64_t nc = 0; nc < slabs; ++nc) {
                double* gslab = pi->adjoint.data() + nc * in_cs;
                const double* aslab = self.adjoint.data() + nc * out_cs;
                for (std::int64_t z = 0; z < od; ++z) {
                    const std::int64_t z0 = md.i0[z], z1 = md.i1[z];
                    const double fz = md.frac[z];
                    for (std::int64_t y = 0; y < oh; ++y) {
                        const std::int64_t y0 = mh.i0[y], y1 = mh.i1[y];
                        const double fy = mh.frac[y];
                        const double* arow = aslab + (z * oh + y) * ow;
                        for (std::int64_t x = 0; x < ow; ++x) {
                            const std::int64_t x0 = mw.i0[x], x1 = mw.i1[x];
                            const double fx = mw.frac[x];
                            const double g = arow[x];
                            const double wz0 = 1.0 - fz, wz1 = fz;
                            const double wy0 = 1.0 - fy, wy1 = fy;
                            const double wx0 = 1.0 - fx, wx1 = fx;
                            gslab[(z0 * ih + y0) * iw + x0] += g * wz0 * wy0 * wx0;
                            gslab[(z0 * ih + y0) * iw + x1] += g * wz0 * wy0 * wx1;
                            gslab[(z0 * ih + y1) * iw + x0] += g * wz0 * wy1 * wx0;
                            gslab[(z0 * ih + y1) * iw + x1] += g * wz0 * wy1 * wx1;
                            gslab[(z1 * ih + y0) * iw + x0] += g * wz1 * wy0 * wx0;
                            gslab[(z1 * ih + y0) * iw + x1] += g * wz1 * wy0 * wx1;
                            gslab[(z1 * ih + y1) * iw + x0] += g * wz1 * wy1 * wx0;
                            gslab[(z1 * ih + y1) * iw + x1] += g * wz1 * wy1 * wx1;
                        }
                    }
                }
            }
        };
    }
    return Tensor::wrap(std::move(node));
}

// ---- batch normalization -------------------------------------------------------

Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 Tensor running_mean, Tensor running_var, bool training, double eps,
                 double momentum) {
    if (input.rank() < 2)
        throw ShapeError("batchnorm: input needs a channel axis, got " + shape_str(input.shape()));
    const std::int64_t c = input.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
        throw ShapeError("batchnorm: gamma/beta must be [" + std::to_string(c) + "]");
    if (running_mean.dim(0) != c || running_var.dim(0) != c)
        throw ShapeError("batchnorm: running stats must be [" + std::to_string(c) + "]");
    if (eps <= 0.0) throw ParamError("batchnorm: eps must be > 0");
    trace::emit({trace::Kind::BatchNorm});

    const std::int64_t total = input.numel();
    const std::int64_t inner = total / (input.dim(0) * c);  // spatial per channel slab
    const std::int64_t nbatch = input.dim(0);
    const std::int64_t m = nbatch * inner;  // samples per channel
    const double* x = input.data().data();

    std::vector<double> mean(static_cast<std::size_t>(c)), var(static_cast<std::size_t>(c));
    if (training) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::int64_t n = 0; n < nbatch; ++n) {
                const double* slab = x + (n * c + ch) * inner;
                for (std::int64_t i = 0; i < inner; ++i) s += slab[i];
            }
            const double mu = s / static_cast<double>(m);
            double v = 0.0;
            for (std::int64_t n = 0; n < nbatch; ++n) {
                const double* slab = x + (n * c + ch) * inner;
                for (std::int64_t i = 0; i < inner; ++i) {
                    const double d = slab[i] - mu;
                    v += d * d;
                }
            }
            mean[static_cast<std::size_t>(ch)] = mu;
            var[static_cast<std::size_t>(ch)] = v / static_cast<double>(m);
        }
        auto& rm = running_mean.data();
        auto& rv = running_var.data();
        for (std::int64_t ch = 0; ch < c; ++ch) {
            rm[static_cast<std::size_t>(ch)] = (1.0 - momentum) * rm[static_cast<std::size_t>(ch)] +
                                               momentum * mean[static_cast<std::size_t>(ch)];
            rv[static_cast<std::size_t>(ch)] = (1.0 - momentum) * rv[static_cast<std::size_t>(ch)] +
                                               momentum * var[static_cast<std::size_t>(ch)];
        }
    } else {
        mean.assign(running_mean.data().begin(), running_mean.data().end());
        var.assign(running_var.data().begin(), running_var.data().end());
    }

    std::vector<double> inv_std(static_cast<std::size_t>(c));
    for (std::int64_t ch = 0; ch < c; ++ch)
        inv_std[static_cast<std::size_t>(ch)] =
            1.0 / std::sqrt(var[static_cast<std::size_t>(ch)] + eps);

    // Normalized values are cached for the backward pass.
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(total));
    std::vector<double> out(static_cast<std::size_t>(total));
    const double* g = gamma.data().data();
    const double* b = beta.data().data();
    for (std::int64_t n = 0; n < nbatch; ++n)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const double mu = mean[static_cast<std::size_t>(ch)];
            const double is = inv_std[static_cast<std::size_t>(ch)];
            const double gg = g[ch], bb = b[ch];
            const double* slab = x + (n * c + ch) * inner;
            double* hs = xhat->data() + (n * c + ch) * inner;
            double* os = out.data() + (n * c + ch) * inner;
            for (std::int64_t i = 0; i < inner; ++i) {
                const double h = (slab[i] - mu) * is;
                hs[i] = h;
                os[i] = gg * h + bb;
            }
        }

    auto node = make_node(input.shape(), std::move(out));
    if (input.requires_grad() || gamma.requires_grad() || beta.requires_grad()) {
        node->requires_grad = true;
        node->parents = {input.node_ptr(), gamma.node_ptr(), beta.node_ptr()};
        Tensor in_t = input, g_t = gamma, b_t = beta;
        node->pull = [in_t, g_t, b_t, xhat, inv_std, training, nbatch, c,
                      inner](detail::Node& self) {
            const std::int64_t m2 = nbatch * inner;
            auto* gx = adj_of(in_t);
            auto* gg = adj_of(g_t);
            auto* gb = adj_of(b_t);
            for (std::int64_t ch = 0; ch < c; ++ch) {
                double sum_dy = 0.0, sum_dy_h = 0.0;
                for (std::int64_t n = 0; n < nbatch; ++n) {
                    const double* dy = self.adjoint.data() + (n * c + ch) * inner;
                    const double* h = xhat->data() + (n * c + ch) * inner;
                    for (std::int64_t i = 0; i < inner; ++i) {
                        sum_dy += dy[i];
                        sum_dy_h += dy[i] * h[i];
                    }
                }
                if (gb) (*gb)[static_cast<std::size_t>(ch)] += sum_dy;
                if (gg) (*gg)[static_cast<std::size_t>(ch)] += sum_dy_h;
                if (gx) {
                    const double gamma_v = g_t.data()[static_cast<std::size_t>(ch)];
                    const double is = inv_std[static_cast<std::size_t>(ch)];
                    const double k = gamma_v * is;
                    if (training) {
                        const double mean_dy = sum_dy / static_cast<double>(m2);
                        const double mean_dy_h = sum_dy_h / static_cast<double>(m2);
                        for (std::int64_t n = 0; n < nbatch; ++n) {
                            const double* dy = self.adjoint.data() + (n * c + ch) * inner;
                            const double* h = xhat->data() + (n * c + ch) * inner;
                            double* gxs = gx->data() + (n * c + ch) * inner;
                            for (std::int64_t i = 0; i < inner; ++i)
                                gxs[i] += k * (dy[i] - mean_dy - h[i] * mean_dy_h);
                        }
                    } else {
                        for (std::int64_t n = 0; n < nbatch; ++n) {
                            const double* dy = self.adjoint.data() + (n * c + ch) * inner;
                            double* gxs = gx->data() + (n * c + ch) * inner;
                            for (std::int64_t i = 0; i < inner; ++i) gxs[i] += k * dy[i];
                        }
                    }
                }
            }
        };
    }
    return Tensor::wrap(std::move(node));
}

// ---- softmax --------------------------------------------------------------------

Tensor softmax_axis(const Tensor& input, int axis) {
    const int rank = input.rank();
    if (axis < 0 || axis >= rank)
        throw ParamError("softmax_axis: axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
    trace::emit({trace::Kind::Softmax});

    const std::int64_t extent = input.dim(axis);
    std::int64_t outer = 1, inner = 1;
    for (int a = 0; a < axis; ++a) outer *= input.dim(a);
    for (int a = axis + 1; a < rank; ++a) inner *= input.dim(a);

    std::vector<double> out(input.data().size());
    const double* x = input.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
            const std::int64_t base = o * extent * inner + i;
            double mx = x[base];
            for (std::int64_t k = 1; k < extent; ++k)
                mx = std::max(mx, x[base + k * inner]);
            double denom = 0.0;
            for (std::int64_t k = 0; k < extent; ++k) {
                const double e = std::exp(x[base + k * inner] - mx);
                out[static_cast<std::size_t>(base + k * inner)] = e;
                denom += e;
            }
            const double inv = 1.0 / denom;
            for (std::int64_t k = 0; k < extent; ++k)
                out[static_cast<std::size_t>(base + k * inner)] *= inv;
        }

    auto node = make_node(input.shape(), std::move(out));
    if (input.requires_grad()) {
        node->requires_grad = true;
        node->parents = {input.node_ptr()};
        auto* pi = input.node();
        node->pull = [pi, outer, inner, extent](detail::Node& self) {
            const double* p = self.value.data();
            const double* a = self.adjoint.data();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t i = 0; i < inner; ++i) {
                    const std::int64_t base = o * extent * inner + i;
                    double dot = 0.0;
                    for (std::int64_t k = 0; k < extent; ++k)
                        dot += a[base + k * inner] * p[base + k * inner];
                    for (std::int64_t k = 0; k < extent; ++k) {
                        const std::int64_t idx = base + k * inner;
                        pi->adjoint[static_cast<std::size_t>(idx)] += p[idx] * (a[idx] - dot);
                    }
                }
        };
    }
    return Tensor::wrap(std::move(node));
}

// ---- smooth L1 --------------------------------------------------------------------

Tensor smooth_l1(const Tensor& pred, const Tensor& target, const Tensor& mask) {
    check_same_shape("smooth_l1", pred, target);
    check_same_shape("smooth_l1", pred, mask);
    double count = 0.0;
    for (double v : mask.data()) {
        if (v != 0.0 && v != 1.0) throw ParamError("smooth_l1: mask must be binary");
        count += v;
    }
    if (count == 0.0) throw EvalError("smooth_l1: mask selects no elements");

    double acc = 0.0;
    const double* p = pred.data().data();
    const double* t = target.data().data();
    const double* mk = mask.data().data();
    const std::size_t n = pred.data().size();
    for (std::size_t i = 0; i < n; ++i) {
        if (mk[i] == 0.0) continue;
        const double r = p[i] - t[i];
        const double a = std::fabs(r);
        acc += a < 1.0 ? 0.5 * r * r : a - 0.5;
    }
    auto node = make_node({1}, {acc / count});
    if (pred.requires_grad() || target.requires_grad()) {
        node->requires_grad = true;
        node->parents = {pred.node_ptr(), target.node_ptr(), mask.node_ptr()};
        Tensor p_t = pred, t_t = target, m_t = mask;
        node->pull = [p_t, t_t, m_t, count](detail::Node& self) {
            const double g = self.adjoint[0] / count;
            auto* gp = adj_of(p_t);
            auto* gt = adj_of(t_t);
            const double* pv = p_t.data().data();
            const double* tv = t_t.data().data();
            const double* mv = m_t.data().data();
            for (std::size_t i = 0; i < p_t.data().size(); ++i) {
                if (mv[i] == 0.0) continue;
                const double r = pv[i] - tv[i];
                const double d = r > 1.0 ? 1.0 : (r < -1.0 ? -1.0 : r);
                if (gp) (*gp)[i] += g * d;
                if (gt) (*gt)[i] -= g * d;
            }
        };
    }
    return Tensor::wrap(std::move(node));
}

// ---- index expectation --------------------------------------------------------------

Tensor index_expectation(const Tensor& probs, int axis) {
    const int rank = probs.rank();
    if (axis < 0 || axis >= rank)
        throw ParamError("index_expectation: axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
    const std::int64_t extent = probs.dim(axis);
    std::int64_t outer = 1, inner = 1;
    for (int a = 0; a < axis; ++a) outer *= probs.dim(a);
    for (int a = axis + 1; a < rank; ++a) inner *= probs.dim(a);

    Shape out_shape;
    for (int a = 0; a < rank; ++a)
        if (a != axis) out_shape.push_back(probs.dim(a));
    if (out_shape.empty()) out_shape.push_back(1);

    std::vector<double> out(static_cast<std::size_t>(outer * inner), 0.0);
    const double* p = probs.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t k = 0; k < extent; ++k) {
            const double* row = p + (o * extent + k) * inner;
            double* orow = out.data() + o * inner;
            const double kk = static_cast<double>(k);
            for (std::int64_t i = 0; i < inner; ++i) orow[i] += kk * row[i];
        }

    auto node = make_node(out_shape, std::move(out));
    if (probs.requires_grad()) {
        node->requires_grad = true;
        node->parents = {probs.node_ptr()};
        auto* pp = probs.node();
        node->pull = [pp, outer, inner, extent](detail::Node& self) {
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t k = 0; k < extent; ++k) {
                    double* grow = pp->adjoint.data() + (o * extent + k) * inner;
                    const double* arow = self.adjoint.data() + o * inner;
                    const double kk = static_cast<double>(k);
                    for (std::int64_t i = 0; i < inner; ++i) grow[i] += kk * arow[i];
                }
        };
    }
    return Tensor::wrap(std::move(node));
}

// ---- custom ops ------------------------------------------------------------------------

Tensor custom_op(const Shape& out_shape, std::vector<double> out_value,
                 const std::vector<Tensor>& inputs, PullFn pull) {
    if (shape_numel(out_shape) != static_cast<std::int64_t>(out_value.size()))
        throw ShapeError("custom_op: value size does not match shape " + shape_str(out_shape));
    auto node = make_node(out_shape, std::move(out_value));
    if (any_requires_grad(inputs)) {
        node->requires_grad = true;
        for (const auto& t : inputs) node->parents.push_back(t.node_ptr());
        std::vector<Tensor> ins = inputs;
        node->pull = [ins, pull](detail::Node& self) {
            std::vector<std::vector<double>*> adjs;
            adjs.reserve(ins.size());
            for (const auto& t : ins) adjs.push_back(adj_of(t));
            pull(self.adjoint, adjs);
        };
    }
    return Tensor::wrap(std::move(node));
}

// ---- backward ----------------------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ParamError("backward: loss must be a defined scalar tensor");
    detail::Node* root = loss.node();
    if (!root->requires_grad) return;  // nothing reachable wants gradients

    // Reachable requires_grad subgraph.
    std::vector<detail::Node*> nodes;
    std::unordered_set<detail::Node*> seen;
    std::vector<detail::Node*> stack = {root};
    seen.insert(root);
    while (!stack.empty()) {
        detail::Node* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

    for (auto* n : nodes) n->adjoint.assign(n->value.size(), 0.0);
    root->adjoint[0] = 1.0;
    for (auto* n : nodes)
        if (n->pull) n->pull(*n);
    for (auto* n : nodes) {
        if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
        for (std::size_t i = 0; i < n->adjoint.size(); ++i) n->grad[i] += n->adjoint[i];
        n->adjoint.clear();
        n->adjoint.shrink_to_fit();
    }
}

}  // namespace sled
