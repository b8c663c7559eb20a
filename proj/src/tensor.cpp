#include "mvir/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mvir {

namespace {

thread_local Tape* g_active_tape = nullptr;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

bool any_requires_grad(const std::vector<Tensor>& inputs) {
    for (const auto& t : inputs)
        if (t.requires_grad()) return true;
    return false;
}

// Creates the output tensor for an op, recording a tape node when a tape is
// active and gradients are needed. `backward` accumulates into input grads
// from the output grad; it is only invoked when the output received one.
Tensor make_op(Shape out_shape, std::vector<double> out_data, const std::vector<Tensor>& inputs,
               std::function<void(detail::TensorImpl& out)> backward) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(out_shape);
    impl->data = std::move(out_data);
    impl->requires_grad = any_requires_grad(inputs);
    if (g_active_tape && impl->requires_grad) {
        Tape::Node node;
        for (const auto& t : inputs) node.inputs.push_back(t.impl());
        node.output = impl;
        std::shared_ptr<detail::TensorImpl> out_ref = impl;
        node.backward = [out_ref, fn = std::move(backward)]() {
            if (out_ref->grad.empty()) return;
            fn(*out_ref);
        };
        impl->tape = g_active_tape;
        impl->node = g_active_tape->record(std::move(node));
    }
    return Tensor(std::move(impl));
}

void accum(detail::TensorImpl& dst, const std::vector<double>& g) {
    dst.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

}  // namespace

long long shape_numel(const Shape& s) {
    long long n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void check_finite(const Tensor& x, const char* op) {
    for (double v : x.data())
        if (!std::isfinite(v)) throw ContractError(std::string(op) + ": non-finite input value");
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    for (int d : shape)
        if (d <= 0) throw ShapeError("Tensor: non-positive extent in " + shape_str(shape));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->data.assign(static_cast<size_t>(shape_numel(shape)), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != static_cast<long long>(values.size()))
        throw ShapeError("Tensor::from: " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = dist(rng);
    return from(std::move(shape), std::move(v), requires_grad);
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item(): tensor has " + std::to_string(size()) + " elements");
    return impl_->data[0];
}

Tensor Tensor::detach_copy() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

// ---- Tape -------------------------------------------------------------------

int Tape::record(Node node) {
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::reset() {
    nodes_.clear();
    consumed_ = false;
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (consumed_) throw ContractError("backward: tape already consumed; reset before reuse");
    auto impl = loss.impl();
    if (impl->tape != this || impl->node < 0)
        throw ContractError("backward: loss was not recorded on this tape");
    consumed_ = true;
    impl->ensure_grad();
    impl->grad[0] = 1.0;
    for (int i = impl->node; i >= 0; --i) nodes_[static_cast<size_t>(i)].backward();
}

Tape* Tape::active() { return g_active_tape; }

Tape::Scope::Scope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
Tape::Scope::~Scope() { g_active_tape = prev_; }

void backward(const Tensor& loss) {
    Tape* tape = loss.impl()->tape;
    if (!tape) throw ContractError("backward: loss has no tape history");
    tape->backward(loss);
}

// ---- Elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (size_t i = 0; i < out.size(); ++i) out[i] += b.at(static_cast<long long>(i));
    auto ai = a.impl();
    auto bi = b.impl();
    return make_op(a.shape(), std::move(out), {a, b}, [ai, bi](detail::TensorImpl& o) {
        if (ai->requires_grad) accum(*ai, o.grad);
        if (bi->requires_grad) accum(*bi, o.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (size_t i = 0; i < out.size(); ++i) out[i] -= b.at(static_cast<long long>(i));
    auto ai = a.impl();
    auto bi = b.impl();
    return make_op(a.shape(), std::move(out), {a, b}, [ai, bi](detail::TensorImpl& o) {
        if (ai->requires_grad) accum(*ai, o.grad);
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) bi->grad[i] -= o.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.size() >= 0 ? static_cast<size_t>(a.size()) : 0);
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.at(static_cast<long long>(i)) * b.at(static_cast<long long>(i));
    auto ai = a.impl();
    auto bi = b.impl();
    return make_op(a.shape(), std::move(out), {a, b}, [ai, bi](detail::TensorImpl& o) {
        if (ai->requires_grad) {
            ai->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i] * bi->data[i];
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) bi->grad[i] += o.grad[i] * ai->data[i];
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= c;
    auto ai = a.impl();
    return make_op(a.shape(), std::move(out), {a}, [ai, c](detail::TensorImpl& o) {
        ai->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += c * o.grad[i];
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) v += c;
    auto ai = a.impl();
    return make_op(a.shape(), std::move(out), {a},
                   [ai](detail::TensorImpl& o) { accum(*ai, o.grad); });
}

Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
    if (x.ndim() != 2 || bias.ndim() != 1 || bias.dim(0) != x.dim(1))
        throw ShapeError("add_rowvec: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
    const int m = x.dim(0), n = x.dim(1);
    std::vector<double> out(x.data().begin(), x.data().end());
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) out[static_cast<size_t>(r) * n + c] += bias.at(c);
    auto xi = x.impl();
    auto bi = bias.impl();
    return make_op(x.shape(), std::move(out), {x, bias}, [xi, bi, m, n](detail::TensorImpl& o) {
        if (xi->requires_grad) accum(*xi, o.grad);
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < n; ++c) bi->grad[static_cast<size_t>(c)] += o.grad[static_cast<size_t>(r) * n + c];
        }
    });
}

// ---- Linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<size_t>(m) * n);
    {
        CMapMat A(a.data().data(), m, k), B(b.data().data(), k, n);
        MapMat C(out.data(), m, n);
        C.noalias() = A * B;
    }
    auto ai = a.impl();
    auto bi = b.impl();
    return make_op({m, n}, std::move(out), {a, b}, [ai, bi, m, k, n](detail::TensorImpl& o) {
        CMapMat dC(o.grad.data(), m, n);
        CMapMat A(ai->data.data(), m, k), B(bi->data.data(), k, n);
        if (ai->requires_grad) {
            ai->ensure_grad();
            MapMat dA(ai->grad.data(), m, k);
            dA.noalias() += dC * B.transpose();
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            MapMat dB(bi->grad.data(), k, n);
            dB.noalias() += A.transpose() * dC;
        }
    });
}

Tensor transpose2d(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("transpose2d: expected rank 2, got " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    std::vector<double> out(static_cast<size_t>(m) * n);
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < n; ++c) out[static_cast<size_t>(c) * m + r] = a.at(static_cast<long long>(r) * n + c);
    auto ai = a.impl();
    return make_op({n, m}, std::move(out), {a}, [ai, m, n](detail::TensorImpl& o) {
        ai->ensure_grad();
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < n; ++c)
                ai->grad[static_cast<size_t>(r) * n + c] += o.grad[static_cast<size_t>(c) * m + r];
    });
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
    if (x.ndim() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1)
        throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) + ") for " +
                         shape_str(x.shape()));
    const int m = x.dim(0), n = x.dim(1), w = c1 - c0;
    std::vector<double> out(static_cast<size_t>(m) * w);
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < w; ++c) out[static_cast<size_t>(r) * w + c] = x.at(static_cast<long long>(r) * n + c0 + c);
    auto xi = x.impl();
    return make_op({m, w}, std::move(out), {x}, [xi, m, n, w, c0](detail::TensorImpl& o) {
        xi->ensure_grad();
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < w; ++c)
                xi->grad[static_cast<size_t>(r) * n + c0 + c] += o.grad[static_cast<size_t>(r) * w + c];
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    const int m = parts[0].dim(0);
    int n = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.dim(0) != m) throw ShapeError("concat_cols: row mismatch");
        n += p.dim(1);
    }
    std::vector<double> out(static_cast<size_t>(m) * n);
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < w; ++c) out[static_cast<size_t>(r) * n + off + c] = p.at(static_cast<long long>(r) * w + c);
        off += w;
    }
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    return make_op({m, n}, std::move(out), parts, [impls, m, n](detail::TensorImpl& o) {
        int off = 0;
        for (const auto& pi : impls) {
            const int w = pi->shape[1];
            if (pi->requires_grad) {
                pi->ensure_grad();
                for (int r = 0; r < m; ++r)
                    for (int c = 0; c < w; ++c)
                        pi->grad[static_cast<size_t>(r) * w + c] += o.grad[static_cast<size_t>(r) * n + off + c];
            }
            off += w;
        }
    });
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
    if (x.ndim() != 2 || r0 < 0 || r1 > x.dim(0) || r0 >= r1)
        throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) + ") for " +
                         shape_str(x.shape()));
    const int n = x.dim(1), h = r1 - r0;
    std::vector<double> out(x.data().begin() + static_cast<long long>(r0) * n,
                            x.data().begin() + static_cast<long long>(r1) * n);
    auto xi = x.impl();
    return make_op({h, n}, std::move(out), {x}, [xi, r0, h, n](detail::TensorImpl& o) {
        xi->ensure_grad();
        for (long long i = 0; i < static_cast<long long>(h) * n; ++i)
            xi->grad[static_cast<size_t>(static_cast<long long>(r0) * n + i)] += o.grad[static_cast<size_t>(i)];
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    const int n = parts[0].dim(1);
    int m = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.dim(1) != n) throw ShapeError("concat_rows: column mismatch");
        m += p.dim(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(m) * n);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    return make_op({m, n}, std::move(out), parts, [impls, n](detail::TensorImpl& o) {
        long long off = 0;
        for (const auto& pi : impls) {
            const long long cnt = static_cast<long long>(pi->shape[0]) * n;
            if (pi->requires_grad) {
                pi->ensure_grad();
                for (long long i = 0; i < cnt; ++i) pi->grad[static_cast<size_t>(i)] += o.grad[static_cast<size_t>(off + i)];
            }
            off += cnt;
        }
    });
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.size())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    std::vector<double> out(x.data().begin(), x.data().end());
    auto xi = x.impl();
    return make_op(std::move(new_shape), std::move(out), {x},
                   [xi](detail::TensorImpl& o) { accum(*xi, o.grad); });
}

// ---- Nonlinearities ---------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0) axis += x.ndim();
    if (axis < 0 || axis >= x.ndim()) throw ShapeError("softmax: axis out of range");
    check_finite(x, "softmax");
    const int n = x.dim(axis);
    long long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
    std::vector<double> out(static_cast<size_t>(x.size()));
    for (long long o = 0; o < outer; ++o) {
        for (long long in = 0; in < inner; ++in) {
            const long long base = o * n * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (int k = 0; k < n; ++k) mx = std::max(mx, x.at(base + k * inner));
            double z = 0.0;
            for (int k = 0; k < n; ++k) {
                double e = std::exp(x.at(base + k * inner) - mx);
                out[static_cast<size_t>(base + k * inner)] = e;
                z += e;
            }
            for (int k = 0; k < n; ++k) out[static_cast<size_t>(base + k * inner)] /= z;
        }
    }
    auto xi = x.impl();
    return make_op(x.shape(), std::move(out), {x}, [xi, outer, inner, n](detail::TensorImpl& o) {
        xi->ensure_grad();
        for (long long ou = 0; ou < outer; ++ou) {
            for (long long in = 0; in < inner; ++in) {
                const long long base = ou * n * inner + in;
                double dot = 0.0;
                for (int k = 0; k < n; ++k)
                    dot += o.grad[static_cast<size_t>(base + k * inner)] * o.data[static_cast<size_t>(base + k * inner)];
                for (int k = 0; k < n; ++k) {
                    const size_t idx = static_cast<size_t>(base + k * inner);
                    xi->grad[idx] += o.data[idx] * (o.grad[idx] - dot);
                }
            }
        }
    });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    const int c = x.dim(x.ndim() - 1);
    if (c < 2) throw ShapeError("layernorm: need at least 2 channels");
    if (gain.size() != c || bias.size() != c) throw ShapeError("layernorm: gain/bias size mismatch");
    const long long rows = x.size() / c;
    std::vector<double> out(static_cast<size_t>(x.size()));
    std::vector<double> inv_std(static_cast<size_t>(rows)), xhat(static_cast<size_t>(x.size()));
    for (long long r = 0; r < rows; ++r) {
        const long long base = r * c;
        double mu = 0.0;
        for (int k = 0; k < c; ++k) mu += x.at(base + k);
        mu /= c;
        double var = 0.0;
        for (int k = 0; k < c; ++k) {
            double d = x.at(base + k) - mu;
            var += d * d;
        }
        var /= c;
        const double is = 1.0 / std::sqrt(var + kLayerNormEps);
        inv_std[static_cast<size_t>(r)] = is;
        for (int k = 0; k < c; ++k) {
            const double xh = (x.at(base + k) - mu) * is;
            xhat[static_cast<size_t>(base + k)] = xh;
            out[static_cast<size_t>(base + k)] = xh * gain.at(k) + bias.at(k);
        }
    }
    auto xi = x.impl();
    auto gi = gain.impl();
    auto bi = bias.impl();
    return make_op(x.shape(), std::move(out), {x, gain, bias},
                   [xi, gi, bi, rows, c, inv_std = std::move(inv_std), xhat = std::move(xhat)](detail::TensorImpl& o) {
        for (long long r = 0; r < rows; ++r) {
            const long long base = r * c;
            const double is = inv_std[static_cast<size_t>(r)];
            double mean_gdy = 0.0, mean_gdy_xh = 0.0;
            for (int k = 0; k < c; ++k) {
                const double gdy = gi->data[static_cast<size_t>(k)] * o.grad[static_cast<size_t>(base + k)];
                mean_gdy += gdy;
                mean_gdy_xh += gdy * xhat[static_cast<size_t>(base + k)];
            }
            mean_gdy /= c;
            mean_gdy_xh /= c;
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (int k = 0; k < c; ++k) {
                    const double gdy = gi->data[static_cast<size_t>(k)] * o.grad[static_cast<size_t>(base + k)];
                    xi->grad[static_cast<size_t>(base + k)] +=
                        is * (gdy - mean_gdy - xhat[static_cast<size_t>(base + k)] * mean_gdy_xh);
                }
            }
            if (gi->requires_grad) {
                gi->ensure_grad();
                for (int k = 0; k < c; ++k)
                    gi->grad[static_cast<size_t>(k)] +=
                        o.grad[static_cast<size_t>(base + k)] * xhat[static_cast<size_t>(base + k)];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int k = 0; k < c; ++k) bi->grad[static_cast<size_t>(k)] += o.grad[static_cast<size_t>(base + k)];
            }
        }
    });
}

Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(static_cast<size_t>(x.size()));
    for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x.at(static_cast<long long>(i))));
    auto xi = x.impl();
    return make_op(x.shape(), std::move(out), {x}, [xi](detail::TensorImpl& o) {
        xi->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            const double s = o.data[i];
            xi->grad[i] += o.grad[i] * s * (1.0 - s);
        }
    });
}

Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    std::vector<double> out(static_cast<size_t>(x.size()));
    for (size_t i = 0; i < out.size(); ++i) {
        const double v = x.at(static_cast<long long>(i));
        out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    auto xi = x.impl();
    return make_op(x.shape(), std::move(out), {x}, [xi](detail::TensorImpl& o) {
        xi->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            const double v = xi->data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            xi->grad[i] += o.grad[i] * (cdf + v * pdf);
        }
    });
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(static_cast<size_t>(x.size()));
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, x.at(static_cast<long long>(i)));
    auto xi = x.impl();
    return make_op(x.shape(), std::move(out), {x}, [xi](detail::TensorImpl& o) {
        xi->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
            if (xi->data[i] > 0.0) xi->grad[i] += o.grad[i];
    });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    auto xi = x.impl();
    return make_op({1}, {s}, {x}, [xi](detail::TensorImpl& o) {
        xi->ensure_grad();
        for (auto& g : xi->grad) g += o.grad[0];
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

// ---- Spatial ops ------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int pad) {
    if (x.ndim() != 3 || kernel.ndim() != 4 || kernel.dim(1) != x.dim(0))
        throw ShapeError("conv2d: bad shapes " + shape_str(x.shape()) + " / " + shape_str(kernel.shape()));
    const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
    if (kh > h + 2 * pad || kw > w + 2 * pad)
        throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input");
    if (bias.defined() && bias.size() != cout) throw ShapeError("conv2d: bias size mismatch");
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (w + 2 * pad - kw) / stride + 1;
    std::vector<double> out(static_cast<size_t>(cout) * oh * ow, 0.0);
    const auto xd = x.data();
    const auto kd = kernel.data();
    for (int co = 0; co < cout; ++co) {
        const double b = bias.defined() ? bias.at(co) : 0.0;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double acc = b;
                const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
                for (int ci = 0; ci < cin; ++ci) {
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = iy0 + ky;
                        if (iy < 0 || iy >= h) continue;
                        const size_t xrow = (static_cast<size_t>(ci) * h + iy) * w;
                        const size_t krow = ((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ix0 + kx;
                            if (ix < 0 || ix >= w) continue;
                            acc += xd[xrow + ix] * kd[krow + kx];
                        }
                    }
                }
                out[(static_cast<size_t>(co) * oh + oy) * ow + ox] = acc;
            }
        }
    }
    auto xi = x.impl();
    auto ki = kernel.impl();
    auto bi = bias.defined() ? bias.impl() : nullptr;
    std::vector<Tensor> inputs{x, kernel};
    if (bias.defined()) inputs.push_back(bias);
    return make_op({cout, oh, ow}, std::move(out), inputs,
                   [xi, ki, bi, cin, h, w, cout, kh, kw, oh, ow, stride, pad](detail::TensorImpl& o) {
        if (xi->requires_grad) xi->ensure_grad();
        if (ki->requires_grad) ki->ensure_grad();
        if (bi && bi->requires_grad) bi->ensure_grad();
        for (int co = 0; co < cout; ++co) {
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    const double g = o.grad[(static_cast<size_t>(co) * oh + oy) * ow + ox];
                    if (g == 0.0) continue;
                    if (bi && bi->requires_grad) bi->grad[static_cast<size_t>(co)] += g;
                    const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
                    for (int ci = 0; ci < cin; ++ci) {
                        for (int ky = 0; ky < kh; ++ky) {
                            const int iy = iy0 + ky;
                            if (iy < 0 || iy >= h) continue;
                            const size_t xrow = (static_cast<size_t>(ci) * h + iy) * w;
                            const size_t krow = ((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int ix = ix0 + kx;
                                if (ix < 0 || ix >= w) continue;
                                if (xi->requires_grad) xi->grad[xrow + ix] += g * ki->data[krow + kx];
                                if (ki->requires_grad) ki->grad[krow + kx] += g * xi->data[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    });
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
    if (x.ndim() != 3) throw ShapeError("bilinear_resize: expected [C,H,W], got " + shape_str(x.shape()));
    if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: bad target size");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    // align-corners-false: sample at target pixel centers mapped into source.
    std::vector<double> out(static_cast<size_t>(c) * out_h * out_w);
    struct Tap { int y0, y1, x0, x1; double wy, wx; };
    std::vector<Tap> taps(static_cast<size_t>(out_h) * out_w);
    const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
    for (int oy = 0; oy < out_h; ++oy) {
        double fy = (oy + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy = fy - y0;
        int y1 = std::clamp(y0 + 1, 0, h - 1);
        y0 = std::clamp(y0, 0, h - 1);
        for (int ox = 0; ox < out_w; ++ox) {
            double fx = (ox + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double wx = fx - x0;
            int x1 = std::clamp(x0 + 1, 0, w - 1);
            x0 = std::clamp(x0, 0, w - 1);
            taps[static_cast<size_t>(oy) * out_w + ox] = {y0, y1, x0, x1, wy, wx};
        }
    }
    for (int ci = 0; ci < c; ++ci) {
        const size_t src = static_cast<size_t>(ci) * h * w;
        const size_t dst = static_cast<size_t>(ci) * out_h * out_w;
        for (size_t p = 0; p < taps.size(); ++p) {
            const Tap& t = taps[p];
            const double v00 = x.at(static_cast<long long>(src + static_cast<size_t>(t.y0) * w + t.x0));
            const double v01 = x.at(static_cast<long long>(src + static_cast<size_t>(t.y0) * w + t.x1));
            const double v10 = x.at(static_cast<long long>(src + static_cast<size_t>(t.y1) * w + t.x0));
            const double v11 = x.at(static_cast<long long>(src + static_cast<size_t>(t.y1) * w + t.x1));
            out[dst + p] = (1 - t.wy) * ((1 - t.wx) * v00 + t.wx * v01) + t.wy * ((1 - t.wx) * v10 + t.wx * v11);
        }
    }
    auto xi = x.impl();
    return make_op({c, out_h, out_w}, std::move(out), {x},
                   [xi, c, h, w, out_h, out_w, taps = std::move(taps)](detail::TensorImpl& o) {
        xi->ensure_grad();
        for (int ci = 0; ci < c; ++ci) {
            const size_t src = static_cast<size_t>(ci) * h * w;
            const size_t dst = static_cast<size_t>(ci) * out_h * out_w;
            for (size_t p = 0; p < taps.size(); ++p) {
                const Tap& t = taps[p];
                const double g = o.grad[dst + p];
                xi->grad[src + static_cast<size_t>(t.y0) * w + t.x0] += g * (1 - t.wy) * (1 - t.wx);
                xi->grad[src + static_cast<size_t>(t.y0) * w + t.x1] += g * (1 - t.wy) * t.wx;
                xi->grad[src + static_cast<size_t>(t.y1) * w + t.x0] += g * t.wy * (1 - t.wx);
                xi->grad[src + static_cast<size_t>(t.y1) * w + t.x1] += g * t.wy * t.wx;
            }
        }
    });
}

Tensor patchify(const Tensor& x, int patch) {
    if (x.ndim() != 3) throw ShapeError("patchify: expected [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % patch != 0 || w % patch != 0)
        throw ConfigError("patchify: extents " + shape_str(x.shape()) + " not divisible by patch " +
                          std::to_string(patch));
    const int gh = h / patch, gw = w / patch, t = gh * gw, f = c * patch * patch;
    std::vector<double> out(static_cast<size_t>(t) * f);
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            const size_t row = (static_cast<size_t>(gy) * gw + gx) * f;
            for (int ci = 0; ci < c; ++ci)
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        out[row + (static_cast<size_t>(ci) * patch + py) * patch + px] =
                            x.at((static_cast<long long>(ci) * h + gy * patch + py) * w + gx * patch + px);
        }
    auto xi = x.impl();
    return make_op({t, f}, std::move(out), {x}, [xi, c, h, w, patch, gh, gw, f](detail::TensorImpl& o) {
        xi->ensure_grad();
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
                const size_t row = (static_cast<size_t>(gy) * gw + gx) * f;
                for (int ci = 0; ci < c; ++ci)
                    for (int py = 0; py < patch; ++py)
                        for (int px = 0; px < patch; ++px)
                            xi->grad[(static_cast<size_t>(ci) * h + gy * patch + py) * w + gx * patch + px] +=
                                o.grad[row + (static_cast<size_t>(ci) * patch + py) * patch + px];
            }
    });
}

Tensor normalize_channels(const Tensor& x, double eps) {
    if (x.ndim() != 3) throw ShapeError("normalize_channels: expected [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const long long hw = static_cast<long long>(h) * w;
    std::vector<double> out(static_cast<size_t>(x.size()));
    std::vector<double> norms(static_cast<size_t>(hw));
    for (long long p = 0; p < hw; ++p) {
        double s = 0.0;
        for (int ci = 0; ci < c; ++ci) {
            const double v = x.at(ci * hw + p);
            s += v * v;
        }
        const double nrm = std::max(std::sqrt(s), eps);
        norms[static_cast<size_t>(p)] = nrm;
        for (int ci = 0; ci < c; ++ci) out[static_cast<size_t>(ci * hw + p)] = x.at(ci * hw + p) / nrm;
    }
    auto xi = x.impl();
    return make_op(x.shape(), std::move(out), {x}, [xi, c, hw, eps, norms = std::move(norms)](detail::TensorImpl& o) {
        xi->ensure_grad();
        for (long long p = 0; p < hw; ++p) {
            const double nrm = norms[static_cast<size_t>(p)];
            if (nrm <= eps) {  // clamped denominator acts as a constant
                for (int ci = 0; ci < c; ++ci) {
                    const size_t idx = static_cast<size_t>(ci * hw + p);
                    xi->grad[idx] += o.grad[idx] / nrm;
                }
                continue;
            }
            double dot = 0.0;
            for (int ci = 0; ci < c; ++ci)
                dot += o.grad[static_cast<size_t>(ci * hw + p)] * xi->data[static_cast<size_t>(ci * hw + p)];
            for (int ci = 0; ci < c; ++ci) {
                const size_t idx = static_cast<size_t>(ci * hw + p);
                xi->grad[idx] += o.grad[idx] / nrm - xi->data[idx] * dot / (nrm * nrm * nrm);
            }
        }
    });
}

Tensor scale_channels(const Tensor& x, const std::vector<double>& scales) {
    if (x.ndim() != 3 || static_cast<int>(scales.size()) != x.dim(0))
        throw ShapeError("scale_channels: need one scale per channel");
    const int c = x.dim(0);
    const long long hw = static_cast<long long>(x.dim(1)) * x.dim(2);
    std::vector<double> out(static_cast<size_t>(x.size()));
    for (int ci = 0; ci < c; ++ci)
        for (long long p = 0; p < hw; ++p)
            out[static_cast<size_t>(ci * hw + p)] = x.at(ci * hw + p) * scales[static_cast<size_t>(ci)];
    auto xi = x.impl();
    return make_op(x.shape(), std::move(out), {x}, [xi, c, hw, scales](detail::TensorImpl& o) {
        xi->ensure_grad();
        for (int ci = 0; ci < c; ++ci)
            for (long long p = 0; p < hw; ++p)
                xi->grad[static_cast<size_t>(ci * hw + p)] +=
                    o.grad[static_cast<size_t>(ci * hw + p)] * scales[static_cast<size_t>(ci)];
    });
}

Tensor diff_h(const Tensor& x) {
    if (x.ndim() != 3 || x.dim(1) < 2) throw ShapeError("diff_h: need [C,H>=2,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<double> out(static_cast<size_t>(c) * (h - 1) * w);
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y + 1 < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                out[(static_cast<size_t>(ci) * (h - 1) + y) * w + xx] =
                    x.at((static_cast<long long>(ci) * h + y + 1) * w + xx) -
                    x.at((static_cast<long long>(ci) * h + y) * w + xx);
    auto xi = x.impl();
    return make_op({c, h - 1, w}, std::move(out), {x}, [xi, c, h, w](detail::TensorImpl& o) {
        xi->ensure_grad();
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y + 1 < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    const double g = o.grad[(static_cast<size_t>(ci) * (h - 1) + y) * w + xx];
                    xi->grad[(static_cast<size_t>(ci) * h + y + 1) * w + xx] += g;
                    xi->grad[(static_cast<size_t>(ci) * h + y) * w + xx] -= g;
                }
    });
}

Tensor diff_w(const Tensor& x) {
    if (x.ndim() != 3 || x.dim(2) < 2) throw ShapeError("diff_w: need [C,H,W>=2]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<double> out(static_cast<size_t>(c) * h * (w - 1));
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx + 1 < w; ++xx)
                out[(static_cast<size_t>(ci) * h + y) * (w - 1) + xx] =
                    x.at((static_cast<long long>(ci) * h + y) * w + xx + 1) -
                    x.at((static_cast<long long>(ci) * h + y) * w + xx);
    auto xi = x.impl();
    return make_op({c, h, w - 1}, std::move(out), {x}, [xi, c, h, w](detail::TensorImpl& o) {
        xi->ensure_grad();
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx + 1 < w; ++xx) {
                    const double g = o.grad[(static_cast<size_t>(ci) * h + y) * (w - 1) + xx];
                    xi->grad[(static_cast<size_t>(ci) * h + y) * w + xx + 1] += g;
                    xi->grad[(static_cast<size_t>(ci) * h + y) * w + xx] -= g;
                }
    });
}

Tensor warp_bilinear(const Tensor& map, const Tensor& flow, const Tensor& valid) {
    if (map.ndim() != 3 || flow.ndim() != 3 || flow.dim(0) != 2)
        throw ShapeError("warp_bilinear: expected map [C,H,W], flow [2,H,W]");
    const int c = map.dim(0), h = map.dim(1), w = map.dim(2);
    if (h < 2 || w < 2) throw ShapeError("warp_bilinear: map must be at least 2x2");
    if (flow.dim(1) != h || flow.dim(2) != w || valid.size() != static_cast<long long>(h) * w)
        throw ShapeError("warp_bilinear: flow/valid extent mismatch");
    const long long hw = static_cast<long long>(h) * w;
    std::vector<double> out(static_cast<size_t>(c) * hw, 0.0);
    struct Tap { int y0, x0; double wy, wx; bool ok; };
    std::vector<Tap> taps(static_cast<size_t>(hw));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const long long p = static_cast<long long>(y) * w + x;
            Tap t{0, 0, 0.0, 0.0, false};
            if (valid.at(p) > 0.5) {
                const double fx = x + flow.at(p);
                const double fy = y + flow.at(hw + p);
                if (fx >= 0.0 && fx <= w - 1.0 && fy >= 0.0 && fy <= h - 1.0) {
                    const int x0 = std::min(static_cast<int>(std::floor(fx)), w - 2);
                    const int y0 = std::min(static_cast<int>(std::floor(fy)), h - 2);
                    t = {y0, x0, fy - y0, fx - x0, true};
                }
            }
            taps[static_cast<size_t>(p)] = t;
        }
    }
    for (int ci = 0; ci < c; ++ci) {
        const size_t src = static_cast<size_t>(ci) * hw;
        for (long long p = 0; p < hw; ++p) {
            const Tap& t = taps[static_cast<size_t>(p)];
            if (!t.ok) continue;
            const size_t i00 = src + static_cast<size_t>(t.y0) * w + t.x0;
            out[src + static_cast<size_t>(p)] = (1 - t.wy) * ((1 - t.wx) * map.at(static_cast<long long>(i00)) +
                                                              t.wx * map.at(static_cast<long long>(i00 + 1))) +
                                                t.wy * ((1 - t.wx) * map.at(static_cast<long long>(i00 + w)) +
                                                        t.wx * map.at(static_cast<long long>(i00 + w + 1)));
        }
    }
    auto mi = map.impl();
    return make_op(map.shape(), std::move(out), {map, flow, valid},
                   [mi, c, hw, w, taps = std::move(taps)](detail::TensorImpl& o) {
        if (!mi->requires_grad) return;
        mi->ensure_grad();
        for (int ci = 0; ci < c; ++ci) {
            const size_t src = static_cast<size_t>(ci) * hw;
            for (long long p = 0; p < hw; ++p) {
                const Tap& t = taps[static_cast<size_t>(p)];
                if (!t.ok) continue;
                const double g = o.grad[src + static_cast<size_t>(p)];
                const size_t i00 = src + static_cast<size_t>(t.y0) * w + t.x0;
                mi->grad[i00] += g * (1 - t.wy) * (1 - t.wx);
                mi->grad[i00 + 1] += g * (1 - t.wy) * t.wx;
                mi->grad[i00 + w] += g * t.wy * (1 - t.wx);
                mi->grad[i00 + w + 1] += g * t.wy * t.wx;
            }
        }
    });
}

}  // namespace mvir
