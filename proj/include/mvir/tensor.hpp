#pragma once

#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mvir/common.hpp"

namespace mvir {

using Shape = std::vector<int>;

class Tape;

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until backward touches this tensor
    bool requires_grad = false;
    Tape* tape = nullptr;
    int node = -1;

    long long size() const { return static_cast<long long>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

long long shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense n-dimensional array of doubles, optionally participating in
/// reverse-mode differentiation through the thread-local active Tape.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false) { return full(std::move(shape), 1.0, requires_grad); }
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double v) { return from({1}, {v}); }
    // Gaussian init, used for parameters.
    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad = true);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    long long size() const { return impl_->size(); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }

    std::span<double> data() { return impl_->data; }
    std::span<const double> data() const { return impl_->data; }
    double& at(long long i) { return impl_->data[static_cast<size_t>(i)]; }
    double at(long long i) const { return impl_->data[static_cast<size_t>(i)]; }
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<double> grad() { impl_->ensure_grad(); return impl_->grad; }
    std::span<const double> grad() const { return impl_->grad; }
    void zero_grad() { if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

    // Detached value copy (no tape history, no grad requirement).
    Tensor detach_copy() const;

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Eagerly built record of one forward pass. Nodes are appended in execution
/// order, which is a valid topological order by construction. A tape can be
/// consumed by backward() exactly once.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    struct Node {
        std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
        std::shared_ptr<detail::TensorImpl> output;
        std::function<void()> backward;
    };

    int record(Node node);
    size_t num_nodes() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }
    void reset();

    /// Populates grads of every recorded ancestor of `loss`.
    void backward(const Tensor& loss);

    static Tape* active();

    /// RAII scope making a tape the thread-local recording target.
    class Scope {
    public:
        explicit Scope(Tape& tape);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

private:
    std::vector<Node> nodes_;
    bool consumed_ = false;
};

/// backward() on the tape that recorded `loss`. Errors if loss is not scalar
/// or the tape was already consumed.
void backward(const Tensor& loss);

// ---- Differentiable primitives -------------------------------------------
// All record onto the active tape when one exists and any input requires grad.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
// X[m,n] + row-broadcast bias[n]
Tensor add_rowvec(const Tensor& x, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& x, Shape new_shape);

Tensor softmax(const Tensor& x, int axis);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// x: [Cin,H,W]; kernel: [Cout,Cin,kh,kw] with odd extents; zero padding;
// cross-correlation semantics. bias may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int pad);
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);

// Non-overlapping p-by-p patches of x[C,H,W] flattened to rows, patch t =
// gy*gw+gx, feature order (c, py, px). Output [T, p*p*C].
Tensor patchify(const Tensor& x, int patch);

// Per-pixel L2 normalization across the channel axis of x[C,H,W].
Tensor normalize_channels(const Tensor& x, double eps = kDivEps);
// Multiply channel c of x[C,H,W] by scales[c] (scales are constants).
Tensor scale_channels(const Tensor& x, const std::vector<double>& scales);

// Forward differences along H / W: [C,H,W] -> [C,H-1,W] / [C,H,W-1].
Tensor diff_h(const Tensor& x);
Tensor diff_w(const Tensor& x);

// Backward bilinear warp: out(v,u) = map sampled at (u + flow_u, v + flow_v).
// flow: [2,H,W] (du, dv), valid: [H,W] in {0,1}; both treated as constants.
// Out-of-bounds or invalid pixels produce 0. Differentiable w.r.t. map.
Tensor warp_bilinear(const Tensor& map, const Tensor& flow, const Tensor& valid);

// ---- Shape helpers --------------------------------------------------------

void check_same_shape(const Tensor& a, const Tensor& b, const char* op);
void check_finite(const Tensor& x, const char* op);

}  // namespace mvir
