#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nsp/errors.hpp"
#include "nsp/rng.hpp"

namespace nsp {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d < 0) throw ShapeError("negative dimension");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph construction in scope; forward values only.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool is_leaf = false;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

/// Value-semantic handle to a node in (or outside of) an autodiff graph.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->value = std::move(data);
        impl->requires_grad = requires_grad;
        impl->is_leaf = true;
        return Tensor(impl);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> v(shape_numel(shape), 0.0);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        std::vector<double> v(shape_numel(shape), value);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from(Shape{}, std::vector<double>{value}, requires_grad);
    }

    /// Leaf filled from a fan-in-scaled uniform distribution.
    static Tensor uniform_init(Shape shape, double bound, Rng& rng, bool requires_grad = true) {
        std::vector<double> v(shape_numel(shape));
        for (auto& e : v) e = rng.uniform(-bound, bound);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    std::size_t numel() const { return impl_->value.size(); }
    bool requires_grad() const { return impl_ && impl_->requires_grad; }

    const std::vector<double>& values() const { return impl_->value; }
    std::vector<double>& values_mut() { return impl_->value; }
    const std::vector<double>& grad() const { return impl_->grad; }

    double item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return impl_->value[0];
    }

    void zero_grad() {
        if (impl_) impl_->grad.assign(impl_->value.size(), 0.0);
    }

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline Tensor make_node(Shape shape, std::vector<double> value,
                        std::vector<Tensor> parents,
                        std::function<void(TensorImpl&)> backward_fn) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->value = std::move(value);
    bool rg = false;
    if (grad_enabled) {
        for (const auto& p : parents)
            if (p.requires_grad()) rg = true;
    }
    impl->requires_grad = rg;
    if (rg) {
        impl->parents.reserve(parents.size());
        for (auto& p : parents) impl->parents.push_back(p.impl());
        impl->backward_fn = std::move(backward_fn);
    }
    return Tensor(impl);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations. Binary ops support trailing-dimension broadcast
// only: the smaller operand's shape must equal a suffix of the larger's.
// ---------------------------------------------------------------------------

namespace detail {

inline bool is_trailing_broadcast(const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    const std::size_t off = big.size() - small.size();
    for (std::size_t i = 0; i < small.size(); ++i)
        if (big[off + i] != small[i]) return false;
    return true;
}

template <class F, class DfA, class DfB>
Tensor binary_op(const Tensor& a, const Tensor& b, F f, DfA dfa, DfB dfb, const char* name) {
    const bool a_big = a.numel() >= b.numel();
    const Tensor& big = a_big ? a : b;
    const Tensor& small = a_big ? b : a;
    if (!is_trailing_broadcast(big.shape(), small.shape()))
        throw ShapeError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    const std::size_t nb = big.numel();
    const std::size_t ns = std::max<std::size_t>(1, small.numel());
    std::vector<double> out(nb);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    const std::size_t na = a.numel();
    const std::size_t nbm = b.numel();
    for (std::size_t i = 0; i < nb; ++i)
        out[i] = f(pa[na == nb ? i : i % ns], pb[nbm == nb ? i : i % ns]);

    auto a_impl = a.impl().get();
    auto b_impl = b.impl().get();
    return make_node(big.shape(), std::move(out), {a, b},
                     [a_impl, b_impl, nb, ns, na, nbm, f, dfa, dfb](TensorImpl& self) {
                         const double* g = self.grad.data();
                         const double* va = a_impl->value.data();
                         const double* vb = b_impl->value.data();
                         if (a_impl->requires_grad) {
                             a_impl->ensure_grad();
                             double* da = a_impl->grad.data();
                             for (std::size_t i = 0; i < nb; ++i) {
                                 const std::size_t ia = (na == nb) ? i : i % ns;
                                 const std::size_t ib = (nbm == nb) ? i : i % ns;
                                 da[ia] += g[i] * dfa(va[ia], vb[ib]);
                             }
                         }
                         if (b_impl->requires_grad) {
                             b_impl->ensure_grad();
                             double* db = b_impl->grad.data();
                             for (std::size_t i = 0; i < nb; ++i) {
                                 const std::size_t ia = (na == nb) ? i : i % ns;
                                 const std::size_t ib = (nbm == nb) ? i : i % ns;
                                 db[ib] += g[i] * dfb(va[ia], vb[ib]);
                             }
                         }
                     });
}

template <class F, class Df>
Tensor unary_op(const Tensor& x, F f, Df df, const char* /*name*/) {
    const std::size_t n = x.numel();
    std::vector<double> out(n);
    const double* px = x.values().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = f(px[i]);
    auto x_impl = x.impl().get();
    return make_node(x.shape(), std::move(out), {x}, [x_impl, n, df](TensorImpl& self) {
        if (!x_impl->requires_grad) return;
        x_impl->ensure_grad();
        const double* g = self.grad.data();
        const double* vx = x_impl->value.data();
        const double* vy = self.value.data();
        double* dx = x_impl->grad.data();
        for (std::size_t i = 0; i < n; ++i) dx[i] += g[i] * df(vx[i], vy[i]);
    });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; }, "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; }, "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; }, "mul");
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); }, "div");
}

inline Tensor scale(const Tensor& x, double c) {
    return detail::unary_op(
        x, [c](double v) { return c * v; }, [c](double, double) { return c; }, "scale");
}

inline Tensor add_scalar(const Tensor& x, double c) {
    return detail::unary_op(
        x, [c](double v) { return v + c; }, [](double, double) { return 1.0; }, "add_scalar");
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor exp_op(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; }, "exp");
}

inline Tensor expm1_op(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return std::expm1(v); }, [](double, double y) { return y + 1.0; },
        "expm1");
}

inline Tensor log_op(const Tensor& x) {
    for (double v : x.values())
        if (v <= 0.0) throw NumericError("log of nonpositive value");
    return detail::unary_op(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; }, "log");
}

inline Tensor log1p_op(const Tensor& x) {
    for (double v : x.values())
        if (v <= -1.0) throw NumericError("log1p of value <= -1");
    return detail::unary_op(
        x, [](double v) { return std::log1p(v); },
        [](double v, double) { return 1.0 / (1.0 + v); }, "log1p");
}

/// softplus(x) = log(1 + e^x), switching to the linear branch for x > 30.
inline Tensor softplus(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); },
        [](double v, double) { return v > 30.0 ? 1.0 : 1.0 / (1.0 + std::exp(-v)); }, "softplus");
}

/// ReLU with subgradient 0 at the kink.
inline Tensor relu(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; }, "relu");
}

inline Tensor square(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; }, "square");
}

/// Clamp to [lo, hi]; gradient is zero outside the open interval.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
    return detail::unary_op(
        x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; }, "clamp");
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    auto x_impl = x.impl().get();
    const std::size_t n = x.numel();
    return detail::make_node(Shape{}, {acc}, {x}, [x_impl, n](TensorImpl& self) {
        if (!x_impl->requires_grad) return;
        x_impl->ensure_grad();
        const double g = self.grad[0];
        double* dx = x_impl->grad.data();
        for (std::size_t i = 0; i < n; ++i) dx[i] += g;
    });
}

inline Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw NumericError("mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

enum class ReduceKind { Sum, Mean };

/// Reduces over entries where mask is nonzero. Mean over an empty mask is an
/// empty-reduction error; sum over an empty mask is 0.
inline Tensor masked_reduce(const Tensor& values, const Tensor& mask, ReduceKind kind) {
    if (values.shape() != mask.shape())
        throw ShapeError("masked_reduce: values " + shape_str(values.shape()) + " vs mask " +
                         shape_str(mask.shape()));
    const std::size_t n = values.numel();
    const double* pv = values.values().data();
    const double* pm = mask.values().data();
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (pm[i] != 0.0) {
            acc += pv[i];
            ++count;
        }
    }
    if (kind == ReduceKind::Mean) {
        if (count == 0) throw NumericError("masked_reduce: mean over empty mask");
        acc /= static_cast<double>(count);
    }
    const double inv = (kind == ReduceKind::Mean) ? 1.0 / static_cast<double>(count) : 1.0;
    auto v_impl = values.impl().get();
    auto m_impl = mask.impl().get();
    return detail::make_node(Shape{}, {acc}, {values, mask},
                             [v_impl, m_impl, n, inv](TensorImpl& self) {
                                 if (!v_impl->requires_grad) return;
                                 v_impl->ensure_grad();
                                 const double g = self.grad[0] * inv;
                                 const double* pm2 = m_impl->value.data();
                                 double* dv = v_impl->grad.data();
                                 for (std::size_t i = 0; i < n; ++i)
                                     if (pm2[i] != 0.0) dv[i] += g;
                             });
}

/// out[k] = x.flat[idx[k]]; duplicate indices accumulate on backward.
inline Tensor gather_cells(const Tensor& x, const std::vector<int>& idx) {
    const std::size_t n = x.numel();
    std::vector<double> out(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] < 0 || static_cast<std::size_t>(idx[k]) >= n)
            throw ShapeError("gather_cells: index out of range");
        out[k] = x.values()[static_cast<std::size_t>(idx[k])];
    }
    auto x_impl = x.impl().get();
    auto indices = idx;
    return detail::make_node(Shape{static_cast<int>(idx.size())}, std::move(out), {x},
                             [x_impl, indices](TensorImpl& self) {
                                 if (!x_impl->requires_grad) return;
                                 x_impl->ensure_grad();
                                 const double* g = self.grad.data();
                                 double* dx = x_impl->grad.data();
                                 for (std::size_t k = 0; k < indices.size(); ++k)
                                     dx[static_cast<std::size_t>(indices[k])] += g[k];
                             });
}

// ---------------------------------------------------------------------------
// Structural operations.
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: numel mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
    auto x_impl = x.impl().get();
    const std::size_t n = x.numel();
    return detail::make_node(std::move(shape), x.values(), {x}, [x_impl, n](TensorImpl& self) {
        if (!x_impl->requires_grad) return;
        x_impl->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) x_impl->grad[i] += self.grad[i];
    });
}

/// Value copy that blocks gradient flow.
inline Tensor detach(const Tensor& x) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = x.shape();
    impl->value = x.values();
    impl->requires_grad = false;
    impl->is_leaf = true;
    return Tensor(impl);
}

/// Zero-pads at the bottom/right of the two innermost dimensions.
inline Tensor pad2d(const Tensor& x, int pad_h, int pad_w) {
    if (x.ndim() < 2) throw ShapeError("pad2d: need at least 2 dims");
    if (pad_h == 0 && pad_w == 0) return x;
    Shape out_shape = x.shape();
    const int H = out_shape[out_shape.size() - 2];
    const int W = out_shape[out_shape.size() - 1];
    const int OH = H + pad_h, OW = W + pad_w;
    out_shape[out_shape.size() - 2] = OH;
    out_shape[out_shape.size() - 1] = OW;
    const std::size_t planes = x.numel() / static_cast<std::size_t>(H * W);
    std::vector<double> out(shape_numel(out_shape), 0.0);
    const double* px = x.values().data();
    for (std::size_t p = 0; p < planes; ++p)
        for (int y = 0; y < H; ++y)
            std::copy(px + (p * H + y) * W, px + (p * H + y) * W + W,
                      out.data() + (p * OH + y) * OW);
    auto x_impl = x.impl().get();
    return detail::make_node(std::move(out_shape), std::move(out), {x},
                             [x_impl, planes, H, W, OH, OW](TensorImpl& self) {
                                 if (!x_impl->requires_grad) return;
                                 x_impl->ensure_grad();
                                 const double* g = self.grad.data();
                                 double* dx = x_impl->grad.data();
                                 for (std::size_t p = 0; p < planes; ++p)
                                     for (int y = 0; y < H; ++y)
                                         for (int xw = 0; xw < W; ++xw)
                                             dx[(p * H + y) * W + xw] +=
                                                 g[(p * OH + y) * OW + xw];
                             });
}

/// Keeps the top-left h x w window of the two innermost dimensions.
inline Tensor crop2d(const Tensor& x, int h, int w) {
    if (x.ndim() < 2) throw ShapeError("crop2d: need at least 2 dims");
    Shape out_shape = x.shape();
    const int H = out_shape[out_shape.size() - 2];
    const int W = out_shape[out_shape.size() - 1];
    if (h > H || w > W) throw ShapeError("crop2d: window larger than tensor");
    if (h == H && w == W) return x;
    out_shape[out_shape.size() - 2] = h;
    out_shape[out_shape.size() - 1] = w;
    const std::size_t planes = x.numel() / static_cast<std::size_t>(H * W);
    std::vector<double> out(shape_numel(out_shape));
    const double* px = x.values().data();
    for (std::size_t p = 0; p < planes; ++p)
        for (int y = 0; y < h; ++y)
            std::copy(px + (p * H + y) * W, px + (p * H + y) * W + w,
                      out.data() + (p * h + y) * w);
    auto x_impl = x.impl().get();
    return detail::make_node(std::move(out_shape), std::move(out), {x},
                             [x_impl, planes, H, W, h, w](TensorImpl& self) {
                                 if (!x_impl->requires_grad) return;
                                 x_impl->ensure_grad();
                                 const double* g = self.grad.data();
                                 double* dx = x_impl->grad.data();
                                 for (std::size_t p = 0; p < planes; ++p)
                                     for (int y = 0; y < h; ++y)
                                         for (int xw = 0; xw < w; ++xw)
                                             dx[(p * H + y) * W + xw] += g[(p * h + y) * w + xw];
                             });
}

/// Concatenates [N,C_i,H,W] tensors along the channel dimension.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: empty input");
    const Shape& s0 = parts[0].shape();
    if (s0.size() != 4) throw ShapeError("concat_channels: expected 4-D tensors");
    const int N = s0[0], H = s0[2], W = s0[3];
    int C = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != 4 || s[0] != N || s[2] != H || s[3] != W)
            throw ShapeError("concat_channels: mismatched shapes");
        C += s[1];
    }
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    std::vector<double> out(static_cast<std::size_t>(N) * C * plane);
    std::vector<int> offsets;
    int off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const int pc = p.shape()[1];
        const double* src = p.values().data();
        for (int n = 0; n < N; ++n)
            std::copy(src + static_cast<std::size_t>(n) * pc * plane,
                      src + static_cast<std::size_t>(n + 1) * pc * plane,
                      out.data() + (static_cast<std::size_t>(n) * C + off) * plane);
        off += pc;
    }
    std::vector<TensorImpl*> impls;
    std::vector<int> chans;
    for (const auto& p : parts) {
        impls.push_back(p.impl().get());
        chans.push_back(p.shape()[1]);
    }
    return detail::make_node(Shape{N, C, H, W}, std::move(out), parts,
                             [impls, chans, offsets, N, C, plane](TensorImpl& self) {
                                 const double* g = self.grad.data();
                                 for (std::size_t k = 0; k < impls.size(); ++k) {
                                     TensorImpl* pi = impls[k];
                                     if (!pi->requires_grad) continue;
                                     pi->ensure_grad();
                                     double* dp = pi->grad.data();
                                     for (int n = 0; n < N; ++n)
                                         for (int c = 0; c < chans[k]; ++c) {
                                             const double* gs =
                                                 g + (static_cast<std::size_t>(n) * C +
                                                      offsets[k] + c) *
                                                         plane;
                                             double* dd =
                                                 dp + (static_cast<std::size_t>(n) * chans[k] +
                                                       c) *
                                                          plane;
                                             for (std::size_t i = 0; i < plane; ++i)
                                                 dd[i] += gs[i];
                                         }
                                 }
                             });
}

/// Nearest-neighbor upsampling of the two innermost dimensions.
inline Tensor upsample_nearest(const Tensor& x, int factor) {
    if (factor < 1) throw ShapeError("upsample_nearest: factor must be >= 1");
    if (factor == 1) return detail::unary_op(
        x, [](double v) { return v; }, [](double, double) { return 1.0; }, "identity");
    if (x.ndim() < 2) throw ShapeError("upsample_nearest: need at least 2 dims");
    Shape out_shape = x.shape();
    const int H = out_shape[out_shape.size() - 2];
    const int W = out_shape[out_shape.size() - 1];
    const int OH = H * factor, OW = W * factor;
    out_shape[out_shape.size() - 2] = OH;
    out_shape[out_shape.size() - 1] = OW;
    const std::size_t planes = x.numel() / static_cast<std::size_t>(H * W);
    std::vector<double> out(shape_numel(out_shape));
    const double* px = x.values().data();
    for (std::size_t p = 0; p < planes; ++p)
        for (int oy = 0; oy < OH; ++oy) {
            const double* src = px + (p * H + oy / factor) * W;
            double* dst = out.data() + (p * OH + oy) * OW;
            for (int ox = 0; ox < OW; ++ox) dst[ox] = src[ox / factor];
        }
    auto x_impl = x.impl().get();
    return detail::make_node(std::move(out_shape), std::move(out), {x},
                             [x_impl, planes, H, W, OH, OW, factor](TensorImpl& self) {
                                 if (!x_impl->requires_grad) return;
                                 x_impl->ensure_grad();
                                 const double* g = self.grad.data();
                                 double* dx = x_impl->grad.data();
                                 for (std::size_t p = 0; p < planes; ++p)
                                     for (int oy = 0; oy < OH; ++oy) {
                                         const double* gs = g + (p * OH + oy) * OW;
                                         double* dd = dx + (p * H + oy / factor) * W;
                                         for (int ox = 0; ox < OW; ++ox)
                                             dd[ox / factor] += gs[ox];
                                     }
                             });
}

/// Inverted dropout; draws its mask from the provided stream at call time.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
    const std::size_t n = x.numel();
    const double keep = 1.0 - rate;
    auto mask = std::make_shared<std::vector<double>>(n);
    std::vector<double> out(n);
    const double* px = x.values().data();
    for (std::size_t i = 0; i < n; ++i) {
        const double m = (rng.uniform() < keep) ? 1.0 / keep : 0.0;
        (*mask)[i] = m;
        out[i] = px[i] * m;
    }
    auto x_impl = x.impl().get();
    return detail::make_node(x.shape(), std::move(out), {x}, [x_impl, mask, n](TensorImpl& self) {
        if (!x_impl->requires_grad) return;
        x_impl->ensure_grad();
        const double* g = self.grad.data();
        double* dx = x_impl->grad.data();
        for (std::size_t i = 0; i < n; ++i) dx[i] += g[i] * (*mask)[i];
    });
}

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation semantics, zero "same" padding).
// ---------------------------------------------------------------------------

namespace detail {

inline int floor_div(int a, int b) {
    int q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}
inline int ceil_div(int a, int b) { return -floor_div(-a, b); }

inline void conv2d_forward(const double* __restrict__ in, const double* __restrict__ ker,
                           const double* __restrict__ bias, double* __restrict__ out, int N,
                           int C, int H, int W, int O, int kh, int kw, int stride, int OH,
                           int OW) {
    const int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    const std::size_t in_plane = static_cast<std::size_t>(H) * W;
    const std::size_t out_plane = static_cast<std::size_t>(OH) * OW;
    for (int n = 0; n < N; ++n) {
        for (int oc = 0; oc < O; ++oc) {
            double* op = out + (static_cast<std::size_t>(n) * O + oc) * out_plane;
            const double b = bias ? bias[oc] : 0.0;
            for (std::size_t i = 0; i < out_plane; ++i) op[i] = b;
            for (int ic = 0; ic < C; ++ic) {
                const double* ip = in + (static_cast<std::size_t>(n) * C + ic) * in_plane;
                const double* kp =
                    ker + ((static_cast<std::size_t>(oc) * C + ic) * kh) * kw;
                for (int ky = 0; ky < kh; ++ky) {
                    for (int kx = 0; kx < kw; ++kx) {
                        const double w = kp[ky * kw + kx];
                        if (w == 0.0) continue;
                        const int ox_lo = std::max(0, ceil_div(pw - kx, stride));
                        const int ox_hi = std::min(OW - 1, floor_div(W - 1 + pw - kx, stride));
                        if (ox_hi < ox_lo) continue;
                        const int oy_lo = std::max(0, ceil_div(ph - ky, stride));
                        const int oy_hi = std::min(OH - 1, floor_div(H - 1 + ph - ky, stride));
                        for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                            const int iy = oy * stride + ky - ph;
                            const double* irow = ip + static_cast<std::size_t>(iy) * W;
                            double* orow = op + static_cast<std::size_t>(oy) * OW;
                            if (stride == 1) {
                                const int ix0 = ox_lo + kx - pw;
                                const double* ir = irow + ix0;
                                for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                    orow[ox] += w * ir[ox - ox_lo];
                            } else {
                                for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                    orow[ox] += w * irow[ox * stride + kx - pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

inline void conv2d_backward(const double* __restrict__ in, const double* __restrict__ ker,
                            const double* __restrict__ gout, double* __restrict__ din,
                            double* __restrict__ dker, double* __restrict__ dbias, int N, int C,
                            int H, int W, int O, int kh, int kw, int stride, int OH, int OW) {
    const int ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    const std::size_t in_plane = static_cast<std::size_t>(H) * W;
    const std::size_t out_plane = static_cast<std::size_t>(OH) * OW;
    for (int n = 0; n < N; ++n) {
        for (int oc = 0; oc < O; ++oc) {
            const double* gp = gout + (static_cast<std::size_t>(n) * O + oc) * out_plane;
            if (dbias) {
                double acc = 0.0;
                for (std::size_t i = 0; i < out_plane; ++i) acc += gp[i];
                dbias[oc] += acc;
            }
            for (int ic = 0; ic < C; ++ic) {
                const double* ip = in + (static_cast<std::size_t>(n) * C + ic) * in_plane;
                double* dip =
                    din ? din + (static_cast<std::size_t>(n) * C + ic) * in_plane : nullptr;
                const double* kp = ker + ((static_cast<std::size_t>(oc) * C + ic) * kh) * kw;
                double* dkp =
                    dker ? dker + ((static_cast<std::size_t>(oc) * C + ic) * kh) * kw : nullptr;
                for (int ky = 0; ky < kh; ++ky) {
                    for (int kx = 0; kx < kw; ++kx) {
                        const double w = kp[ky * kw + kx];
                        const int ox_lo = std::max(0, ceil_div(pw - kx, stride));
                        const int ox_hi = std::min(OW - 1, floor_div(W - 1 + pw - kx, stride));
                        if (ox_hi < ox_lo) continue;
                        const int oy_lo = std::max(0, ceil_div(ph - ky, stride));
                        const int oy_hi = std::min(OH - 1, floor_div(H - 1 + ph - ky, stride));
                        double wacc = 0.0;
                        for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                            const int iy = oy * stride + ky - ph;
                            const double* irow = ip + static_cast<std::size_t>(iy) * W;
                            const double* grow = gp + static_cast<std::size_t>(oy) * OW;
                            double* dirow =
                                dip ? dip + static_cast<std::size_t>(iy) * W : nullptr;
                            if (stride == 1) {
                                const int ix0 = ox_lo + kx - pw;
                                if (dkp) {
                                    const double* ir = irow + ix0;
                                    for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                        wacc += grow[ox] * ir[ox - ox_lo];
                                }
                                if (dirow) {
                                    double* dr = dirow + ix0;
                                    for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                        dr[ox - ox_lo] += w * grow[ox];
                                }
                            } else {
                                for (int ox = ox_lo; ox <= ox_hi; ++ox) {
                                    const int ix = ox * stride + kx - pw;
                                    if (dkp) wacc += grow[ox] * irow[ix];
                                    if (dirow) dirow[ix] += w * grow[ox];
                                }
                            }
                        }
                        if (dkp) dkp[ky * kw + kx] += wacc;
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// Cross-correlation of input [N,C,H,W] with kernel [O,C,kh,kw] plus optional
/// bias [O]; zero padding keeps "same" geometry, stride 2 halves spatial dims
/// (ceil). Kernel spatial dims must be odd.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     int stride = 1) {
    if (input.ndim() != 4) throw ShapeError("conv2d: input must be 4-D, got " +
                                            shape_str(input.shape()));
    if (kernel.ndim() != 4) throw ShapeError("conv2d: kernel must be 4-D");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int O = kernel.dim(0), kc = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kc != C)
        throw ShapeError("conv2d: channel mismatch, input C=" + std::to_string(C) +
                         " kernel C=" + std::to_string(kc));
    if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel dims must be odd");
    if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
    const bool has_bias = bias.defined();
    if (has_bias && (bias.ndim() != 1 || bias.dim(0) != O))
        throw ShapeError("conv2d: bias must have shape [O]");
    const int OH = (stride == 1) ? H : (H + 1) / 2;
    const int OW = (stride == 1) ? W : (W + 1) / 2;

    std::vector<double> out(static_cast<std::size_t>(N) * O * OH * OW);
    detail::conv2d_forward(input.values().data(), kernel.values().data(),
                           has_bias ? bias.values().data() : nullptr, out.data(), N, C, H, W, O,
                           kh, kw, stride, OH, OW);

    std::vector<Tensor> parents{input, kernel};
    if (has_bias) parents.push_back(bias);
    auto in_impl = input.impl().get();
    auto k_impl = kernel.impl().get();
    auto b_impl = has_bias ? bias.impl().get() : nullptr;
    return detail::make_node(
        Shape{N, O, OH, OW}, std::move(out), std::move(parents),
        [in_impl, k_impl, b_impl, N, C, H, W, O, kh, kw, stride, OH, OW](TensorImpl& self) {
            double* din = nullptr;
            double* dker = nullptr;
            double* dbias = nullptr;
            if (in_impl->requires_grad) {
                in_impl->ensure_grad();
                din = in_impl->grad.data();
            }
            if (k_impl->requires_grad) {
                k_impl->ensure_grad();
                dker = k_impl->grad.data();
            }
            if (b_impl && b_impl->requires_grad) {
                b_impl->ensure_grad();
                dbias = b_impl->grad.data();
            }
            detail::conv2d_backward(in_impl->value.data(), k_impl->value.data(),
                                    self.grad.data(), din, dker, dbias, N, C, H, W, O, kh, kw,
                                    stride, OH, OW);
        });
}

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride = 1) {
    return conv2d(input, kernel, Tensor(), stride);
}

// ---------------------------------------------------------------------------
// Backward pass.
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss; accumulates into .grad of every
/// requires_grad node reachable from it. Each node is visited exactly once.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw NumericError("backward: loss must be scalar");
    TensorImpl* root = loss.impl().get();
    if (!root->requires_grad) return;

    // Iterative post-order DFS for a topological order.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            TensorImpl* child = node->parents[next_child].get();
            ++next_child;
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.
// ---------------------------------------------------------------------------

struct GradCheckResult {
    double max_rel_err = 0.0;
    int checked = 0;
    int skipped_kinks = 0;
};

/// Central-difference check of d f() / d params over a random subset of at
/// least `coords_per_param` coordinates per parameter. Coordinates where the
/// one-sided slopes disagree (a kink crossed within eps, e.g. ReLU at 0) are
/// excluded. Relative error uses max(|analytic|, |numeric|, 1e-3) as the
/// denominator so near-zero gradients are compared absolutely.
inline GradCheckResult grad_check(const std::function<Tensor()>& f,
                                  const std::vector<Tensor>& params, double eps, Rng& rng,
                                  int coords_per_param = 64) {
    for (auto& p : params) const_cast<Tensor&>(p).zero_grad();
    Tensor loss = f();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        if (p.grad().empty())
            analytic.emplace_back(p.numel(), 0.0);
        else
            analytic.push_back(p.grad());
    }

    auto eval = [&]() {
        NoGradGuard ng;
        return f().item();
    };

    GradCheckResult res;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& vals = const_cast<Tensor&>(params[pi]).values_mut();
        const std::size_t n = vals.size();
        std::vector<std::size_t> coords;
        if (static_cast<int>(n) <= coords_per_param) {
            coords.resize(n);
            std::iota(coords.begin(), coords.end(), std::size_t{0});
        } else {
            std::unordered_set<std::size_t> seen;
            while (static_cast<int>(coords.size()) < coords_per_param) {
                std::size_t c = rng.uniform_int(n);
                if (seen.insert(c).second) coords.push_back(c);
            }
            std::sort(coords.begin(), coords.end());
        }
        for (std::size_t c : coords) {
            const double saved = vals[c];
            vals[c] = saved + eps;
            const double fp = eval();
            vals[c] = saved - eps;
            const double fm = eval();
            vals[c] = saved;
            const double f0 = eval();
            const double sp = (fp - f0) / eps;
            const double sm = (f0 - fm) / eps;
            const double slope_gap = std::fabs(sp - sm);
            if (slope_gap > 0.03 * std::max(std::fabs(sp), std::fabs(sm)) &&
                slope_gap > 1e-7) {
                ++res.skipped_kinks;
                continue;
            }
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[pi][c];
            const double err =
                std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-3});
            res.max_rel_err = std::max(res.max_rel_err, err);
            ++res.checked;
        }
    }
    return res;
}

}  // namespace nsp
