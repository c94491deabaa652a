// Differentiable free functions over Tensor<S>: elementwise arithmetic with
// trailing-dimension broadcasting, matmul, reductions and shape movement.
// Structured network ops (conv, norms, sampling) live in nn_ops.hpp.

#pragma once

#include <Eigen/Dense>

#include "priordet/tensor.hpp"

namespace priordet {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

// Trailing-dimension broadcast of two shapes. Anything fancier is rejected.
inline Dims broadcast_shape(const Dims& a, const Dims& b, const char* op) {
    const std::size_t r = std::max(a.size(), b.size());
    Dims out(r, 1);
    for (std::size_t k = 0; k < r; ++k) {
        const std::int64_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
        const std::int64_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
        if (da != db && da != 1 && db != 1)
            fail_shape(std::string(op) + ": shapes " + dims_str(a) + " and " + dims_str(b) +
                       " are not broadcastable at trailing dim " + std::to_string(k));
        out[r - 1 - k] = std::max(da, db);
    }
    return out;
}

// Strides of `shape` aligned to `out` (trailing alignment), 0 where broadcast.
inline std::vector<std::int64_t> aligned_strides(const Dims& shape, const Dims& out) {
    const auto st = strides_of(shape);
    std::vector<std::int64_t> r(out.size(), 0);
    for (std::size_t k = 0; k < shape.size(); ++k) {
        const std::size_t oi = out.size() - shape.size() + k;
        r[oi] = (shape[k] == 1 && out[oi] != 1) ? 0 : st[k];
    }
    return r;
}

// Odometer walk over `out`, calling f(out_linear, offset_a, offset_b).
template <typename F>
void bcast_walk(const Dims& out, const std::vector<std::int64_t>& sa,
                const std::vector<std::int64_t>& sb, F&& f) {
    const std::int64_t total = numel_of(out);
    const int r = static_cast<int>(out.size());
    if (r == 0) {
        f(0, 0, 0);
        return;
    }
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t ia = 0, ib = 0;
    for (std::int64_t io = 0; io < total; ++io) {
        f(io, ia, ib);
        for (int k = r - 1; k >= 0; --k) {
            ++idx[k];
            ia += sa[k];
            ib += sb[k];
            if (idx[k] < out[k]) break;
            ia -= sa[k] * out[k];
            ib -= sb[k] * out[k];
            idx[k] = 0;
        }
    }
}

// dst.grad[...] += sum of `full` over the axes dst was broadcast along.
template <typename S>
void reduce_grad_into(const std::vector<S>& full, const Dims& full_shape, TensorNode<S>* dst) {
    dst->ensure_grad();
    if (dst->shape == full_shape) {
        for (std::size_t i = 0; i < full.size(); ++i) dst->grad[i] += full[i];
        return;
    }
    const auto sd = aligned_strides(dst->shape, full_shape);
    const std::vector<std::int64_t> zero(full_shape.size(), 0);
    bcast_walk(full_shape, sd, zero,
               [&](std::int64_t io, std::int64_t id, std::int64_t) { dst->grad[id] += full[io]; });
}

template <typename S>
Tensor<S> finish_unary(const Tensor<S>& a, Dims shape, std::vector<S> vals,
                       std::function<void(const TensorNode<S>&, TensorNode<S>&)> pump) {
    auto out = Tensor<S>::from(std::move(shape), std::move(vals), false);
    if (grad_mode() && a.requires_grad()) {
        out.node()->requires_grad = true;
        out.node()->parents = {a.node()};
        auto an = a.node();
        auto* on = out.node().get();
        out.node()->backprop = [an, on, pump = std::move(pump)]() {
            an->ensure_grad();
            pump(*on, *an);
        };
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise unary
// ---------------------------------------------------------------------------

// f maps value -> value; df(x, y) is dy/dx given input x and output y.
template <typename S, typename F, typename DF>
Tensor<S> unary_op(const Tensor<S>& a, F f, DF df) {
    std::vector<S> vals(a.values().begin(), a.values().end());
    for (auto& v : vals) v = f(v);
    auto out = Tensor<S>::from(a.shape(), std::move(vals), false);
    if (grad_mode() && a.requires_grad()) {
        out.node()->requires_grad = true;
        out.node()->parents = {a.node()};
        auto an = a.node();
        auto* on = out.node().get();
        out.node()->backprop = [an, on, df]() {
            an->ensure_grad();
            const auto n = an->value.size();
            for (std::size_t i = 0; i < n; ++i)
                an->grad[i] += on->grad[i] * df(an->value[i], on->value[i]);
        };
    }
    return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
    return unary_op(a, [](S x) { return x > S(0) ? x : S(0); },
                    [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
    return unary_op(a,
                    [](S x) {
                        if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
                        const S e = std::exp(x);
                        return e / (S(1) + e);
                    },
                    [](S, S y) { return y * (S(1) - y); });
}

// log(sigmoid(x)), stable on both tails; gradient is sigmoid(-x).
template <typename S>
Tensor<S> log_sigmoid(const Tensor<S>& a) {
    return unary_op(a,
                    [](S x) { return x < S(0) ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x)); },
                    [](S x, S) {
                        if (x <= S(0)) return S(1) / (S(1) + std::exp(x));
                        const S e = std::exp(-x);
                        return e / (S(1) + e);
                    });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
    return unary_op(a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
    return unary_op(a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& a) {
    return unary_op(a, [](S x) { return std::sqrt(x); },
                    [](S, S y) { return S(0.5) / y; });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& a) {
    return unary_op(a, [](S x) { return std::abs(x); },
                    [](S x, S) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
    return unary_op(a, [](S x) { return -x; }, [](S, S) { return S(-1); });
}

template <typename S>
Tensor<S> pow_scalar(const Tensor<S>& a, S p) {
    return unary_op(a, [p](S x) { return std::pow(x, p); },
                    [p](S x, S) { return p * std::pow(x, p - S(1)); });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
    return unary_op(a, [c](S x) { return x + c; }, [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
    return unary_op(a, [c](S x) { return x * c; }, [c](S, S) { return c; });
}

// ---------------------------------------------------------------------------
// Elementwise binary with broadcasting
// ---------------------------------------------------------------------------

// dfa/dfb give the local partials as functions of (a, b) at each coordinate.
template <typename S, typename F, typename DA, typename DB>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, const char* name, F f, DA dfa, DB dfb) {
    const Dims oshape = detail::broadcast_shape(a.shape(), b.shape(), name);
    const auto sa = detail::aligned_strides(a.shape(), oshape);
    const auto sb = detail::aligned_strides(b.shape(), oshape);
    std::vector<S> vals(static_cast<std::size_t>(numel_of(oshape)));
    const auto av = a.values();
    const auto bv = b.values();
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = f(av[i], bv[i]);
    } else {
        detail::bcast_walk(oshape, sa, sb, [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
            vals[io] = f(av[ia], bv[ib]);
        });
    }
    auto out = Tensor<S>::from(oshape, std::move(vals), false);
    const bool rg = grad_mode() && (a.requires_grad() || b.requires_grad());
    if (rg) {
        out.node()->requires_grad = true;
        out.node()->parents = {a.node(), b.node()};
        auto an = a.node();
        auto bn = b.node();
        auto* on = out.node().get();
        out.node()->backprop = [an, bn, on, sa, sb, dfa, dfb]() {
            const Dims& oshape = on->shape;
            const bool same = an->shape == bn->shape;
            if (an->requires_grad) {
                if (same && an->shape == oshape) {
                    an->ensure_grad();
                    for (std::size_t i = 0; i < on->grad.size(); ++i)
                        an->grad[i] += on->grad[i] * dfa(an->value[i], bn->value[i]);
                } else {
                    std::vector<S> full(on->grad.size());
                    detail::bcast_walk(oshape, sa, sb, [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
                        full[io] = on->grad[io] * dfa(an->value[ia], bn->value[ib]);
                    });
                    detail::reduce_grad_into(full, oshape, an.get());
                }
            }
            if (bn->requires_grad) {
                if (same && bn->shape == oshape) {
                    bn->ensure_grad();
                    for (std::size_t i = 0; i < on->grad.size(); ++i)
                        bn->grad[i] += on->grad[i] * dfb(an->value[i], bn->value[i]);
                } else {
                    std::vector<S> full(on->grad.size());
                    detail::bcast_walk(oshape, sa, sb, [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
                        full[io] = on->grad[io] * dfb(an->value[ia], bn->value[ib]);
                    });
                    detail::reduce_grad_into(full, oshape, bn.get());
                }
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    return binary_op(a, b, "add", [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
                     [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return binary_op(a, b, "sub", [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
                     [](S, S) { return S(-1); });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    return binary_op(a, b, "mul", [](S x, S y) { return x * y; }, [](S, S y) { return y; },
                     [](S x, S) { return x; });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
    return binary_op(a, b, "div", [](S x, S y) { return x / y; },
                     [](S, S y) { return S(1) / y; },
                     [](S x, S y) { return -x / (y * y); });
}

// Gradient follows the selected argument; ties go to a.
template <typename S>
Tensor<S> maximum(const Tensor<S>& a, const Tensor<S>& b) {
    return binary_op(a, b, "maximum", [](S x, S y) { return x >= y ? x : y; },
                     [](S x, S y) { return x >= y ? S(1) : S(0); },
                     [](S x, S y) { return x >= y ? S(0) : S(1); });
}

template <typename S>
Tensor<S> minimum(const Tensor<S>& a, const Tensor<S>& b) {
    return binary_op(a, b, "minimum", [](S x, S y) { return x <= y ? x : y; },
                     [](S x, S y) { return x <= y ? S(1) : S(0); },
                     [](S x, S y) { return x <= y ? S(0) : S(1); });
}

// Symmetric clamp to [-bound, bound]. Bounds are not differentiated; the
// gradient passes only through unclamped entries.
template <typename S>
Tensor<S> clamp_sym(const Tensor<S>& a, const Tensor<S>& bound) {
    return binary_op(a, bound, "clamp_sym",
                     [](S x, S m) { return std::min(std::max(x, -m), m); },
                     [](S x, S m) { return (x > -m && x < m) ? S(1) : S(0); },
                     [](S, S) { return S(0); });
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, S c) { return mul_scalar(a, c); }
template <typename S>
Tensor<S> operator*(S c, const Tensor<S>& a) { return mul_scalar(a, c); }
template <typename S>
Tensor<S> operator+(const Tensor<S>& a, S c) { return add_scalar(a, c); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

// Supports (M,K)x(K,N), (B,M,K)x(B,K,N), and either side rank-2 against a
// rank-3 batch (the rank-2 operand is shared across the batch).
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    const int ra = a.rank(), rb = b.rank();
    if ((ra != 2 && ra != 3) || (rb != 2 && rb != 3))
        fail_shape("matmul: ranks must be 2 or 3, got " + dims_str(a.shape()) + " x " + dims_str(b.shape()));
    const std::int64_t Ba = ra == 3 ? a.dim(0) : 1;
    const std::int64_t Bb = rb == 3 ? b.dim(0) : 1;
    if (Ba != Bb && Ba != 1 && Bb != 1)
        fail_shape("matmul: batch dims " + std::to_string(Ba) + " and " + std::to_string(Bb) + " differ");
    const std::int64_t B = std::max(Ba, Bb);
    const std::int64_t M = a.dim(ra - 2), K = a.dim(ra - 1);
    const std::int64_t Kb = b.dim(rb - 2), N = b.dim(rb - 1);
    if (K != Kb)
        fail_shape("matmul: inner dims disagree, " + dims_str(a.shape()) + " x " + dims_str(b.shape()));

    Dims oshape = (ra == 3 || rb == 3) ? Dims{B, M, N} : Dims{M, N};
    std::vector<S> vals(static_cast<std::size_t>(B * M * N));
    const S* ap = a.values().data();
    const S* bp = b.values().data();
    for (std::int64_t i = 0; i < B; ++i) {
        Eigen::Map<const EMat<S>> ma(ap + (Ba == 1 ? 0 : i * M * K), M, K);
        Eigen::Map<const EMat<S>> mb(bp + (Bb == 1 ? 0 : i * K * N), K, N);
        Eigen::Map<EMat<S>> mo(vals.data() + i * M * N, M, N);
        mo.noalias() = ma * mb;
    }
    auto out = Tensor<S>::from(std::move(oshape), std::move(vals), false);
    if (grad_mode() && (a.requires_grad() || b.requires_grad())) {
        out.node()->requires_grad = true;
        out.node()->parents = {a.node(), b.node()};
        auto an = a.node();
        auto bn = b.node();
        auto* on = out.node().get();
        out.node()->backprop = [an, bn, on, B, Ba, Bb, M, K, N]() {
            const S* gp = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < B; ++i) {
                    Eigen::Map<const EMat<S>> mg(gp + i * M * N, M, N);
                    Eigen::Map<const EMat<S>> mb(bn->value.data() + (Bb == 1 ? 0 : i * K * N), K, N);
                    Eigen::Map<EMat<S>> mda(an->grad.data() + (Ba == 1 ? 0 : i * M * K), M, K);
                    mda.noalias() += mg * mb.transpose();
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t i = 0; i < B; ++i) {
                    Eigen::Map<const EMat<S>> mg(gp + i * M * N, M, N);
                    Eigen::Map<const EMat<S>> ma(an->value.data() + (Ba == 1 ? 0 : i * M * K), M, K);
                    Eigen::Map<EMat<S>> mdb(bn->grad.data() + (Bb == 1 ? 0 : i * K * N), K, N);
                    mdb.noalias() += ma.transpose() * mg;
                }
            }
        };
    }
    return out;
}

// y = x W^T + b for x (..., in), W (out, in), b (out) or undefined.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b = Tensor<S>()) {
    if (w.rank() != 2) fail_shape("linear: weight must be rank 2, got " + dims_str(w.shape()));
    const std::int64_t in = w.dim(1), outf = w.dim(0);
    if (x.dim(-1) != in)
        fail_shape("linear: input feature dim " + std::to_string(x.dim(-1)) + " != weight in dim " +
                   std::to_string(in));
    if (b.defined() && (b.rank() != 1 || b.dim(0) != outf))
        fail_shape("linear: bias shape " + dims_str(b.shape()) + " != (out)");
    const std::int64_t P = x.numel() / in;
    Dims oshape = x.shape();
    oshape.back() = outf;
    std::vector<S> vals(static_cast<std::size_t>(P * outf));
    {
        Eigen::Map<const EMat<S>> mx(x.values().data(), P, in);
        Eigen::Map<const EMat<S>> mw(w.values().data(), outf, in);
        Eigen::Map<EMat<S>> mo(vals.data(), P, outf);
        mo.noalias() = mx * mw.transpose();
        if (b.defined()) {
            Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> mb(b.values().data(), outf);
            mo.rowwise() += mb.transpose();
        }
    }
    auto out = Tensor<S>::from(std::move(oshape), std::move(vals), false);
    const bool rg = grad_mode() && (x.requires_grad() || w.requires_grad() ||
                                    (b.defined() && b.requires_grad()));
    if (rg) {
        out.node()->requires_grad = true;
        out.node()->parents = {x.node(), w.node()};
        if (b.defined()) out.node()->parents.push_back(b.node());
        auto xn = x.node();
        auto wn = w.node();
        auto bn = b.defined() ? b.node() : nullptr;
        auto* on = out.node().get();
        out.node()->backprop = [xn, wn, bn, on, P, in, outf]() {
            Eigen::Map<const EMat<S>> mg(on->grad.data(), P, outf);
            if (xn->requires_grad) {
                xn->ensure_grad();
                Eigen::Map<const EMat<S>> mw(wn->value.data(), outf, in);
                Eigen::Map<EMat<S>> mdx(xn->grad.data(), P, in);
                mdx.noalias() += mg * mw;
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                Eigen::Map<const EMat<S>> mx(xn->value.data(), P, in);
                Eigen::Map<EMat<S>> mdw(wn->grad.data(), outf, in);
                mdw.noalias() += mg.transpose() * mx;
            }
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> mdb(bn->grad.data(), outf);
                mdb.noalias() += mg.colwise().sum().transpose();
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
    S acc = S(0);
    for (S v : a.values()) acc += v;
    return detail::finish_unary<S>(a, {1}, {acc}, [](const TensorNode<S>& o, TensorNode<S>& g) {
        const S d = o.grad[0];
        for (auto& v : g.grad) v += d;
    });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
    const S inv = S(1) / static_cast<S>(a.numel());
    S acc = S(0);
    for (S v : a.values()) acc += v;
    return detail::finish_unary<S>(a, {1}, {acc * inv}, [inv](const TensorNode<S>& o, TensorNode<S>& g) {
        const S d = o.grad[0] * inv;
        for (auto& v : g.grad) v += d;
    });
}

// Sum over one axis; keepdim keeps a size-1 slot.
template <typename S>
Tensor<S> sum_axis(const Tensor<S>& a, int axis, bool keepdim = false) {
    if (axis < 0) axis += a.rank();
    if (axis < 0 || axis >= a.rank()) fail_shape("sum_axis: axis out of range");
    const auto& sh = a.shape();
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sh[i];
    for (int i = axis + 1; i < a.rank(); ++i) inner *= sh[i];
    const std::int64_t n = sh[axis];
    Dims oshape;
    for (int i = 0; i < a.rank(); ++i) {
        if (i == axis) {
            if (keepdim) oshape.push_back(1);
        } else {
            oshape.push_back(sh[i]);
        }
    }
    if (oshape.empty()) oshape = {1};
    std::vector<S> vals(static_cast<std::size_t>(outer * inner), S(0));
    const auto av = a.values();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t k = 0; k < n; ++k) {
            const S* src = av.data() + (o * n + k) * inner;
            S* dst = vals.data() + o * inner;
            for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    return detail::finish_unary<S>(a, std::move(oshape), std::move(vals),
                                   [outer, n, inner](const TensorNode<S>& o, TensorNode<S>& g) {
                                       for (std::int64_t ou = 0; ou < outer; ++ou)
                                           for (std::int64_t k = 0; k < n; ++k) {
                                               S* dst = g.grad.data() + (ou * n + k) * inner;
                                               const S* src = o.grad.data() + ou * inner;
                                               for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                                           }
                                   });
}

template <typename S>
Tensor<S> mean_axis(const Tensor<S>& a, int axis, bool keepdim = false) {
    if (axis < 0) axis += a.rank();
    return mul_scalar(sum_axis(a, axis, keepdim), S(1) / static_cast<S>(a.dim(axis)));
}

// ---------------------------------------------------------------------------
// Shape movement
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Dims shape) {
    // One dim may be -1 and is inferred.
    std::int64_t known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) fail_shape("reshape: more than one -1 dim");
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0) shape[infer] = a.numel() / known;
    if (numel_of(shape) != a.numel())
        fail_shape("reshape: cannot view " + dims_str(a.shape()) + " as " + dims_str(shape));
    std::vector<S> vals(a.values().begin(), a.values().end());
    return detail::finish_unary<S>(a, std::move(shape), std::move(vals),
                                   [](const TensorNode<S>& o, TensorNode<S>& g) {
                                       for (std::size_t i = 0; i < g.grad.size(); ++i) g.grad[i] += o.grad[i];
                                   });
}

template <typename S>
Tensor<S> permute(const Tensor<S>& a, const std::vector<int>& perm) {
    const int r = a.rank();
    if (static_cast<int>(perm.size()) != r) fail_shape("permute: perm size != rank");
    Dims oshape(r);
    for (int i = 0; i < r; ++i) oshape[i] = a.dim(perm[i]);
    const auto ist = strides_of(a.shape());
    std::vector<std::int64_t> gather(r);  // stride in input per output axis
    for (int i = 0; i < r; ++i) gather[i] = ist[perm[i]];
    const std::int64_t total = a.numel();
    std::vector<S> vals(static_cast<std::size_t>(total));
    std::vector<std::int64_t> src_index(static_cast<std::size_t>(total));
    {
        std::vector<std::int64_t> idx(r, 0);
        std::int64_t is = 0;
        const auto av = a.values();
        for (std::int64_t io = 0; io < total; ++io) {
            vals[io] = av[is];
            src_index[io] = is;
            for (int k = r - 1; k >= 0; --k) {
                ++idx[k];
                is += gather[k];
                if (idx[k] < oshape[k]) break;
                is -= gather[k] * oshape[k];
                idx[k] = 0;
            }
        }
    }
    return detail::finish_unary<S>(a, std::move(oshape), std::move(vals),
                                   [src_index = std::move(src_index)](const TensorNode<S>& o, TensorNode<S>& g) {
                                       for (std::size_t i = 0; i < src_index.size(); ++i)
                                           g.grad[src_index[i]] += o.grad[i];
                                   });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
    if (parts.empty()) fail_shape("concat: empty input list");
    const int r = parts[0].rank();
    if (axis < 0) axis += r;
    Dims oshape = parts[0].shape();
    std::int64_t total_axis = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) fail_shape("concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis && p.dim(i) != oshape[i])
                fail_shape("concat: dim " + std::to_string(i) + " mismatch: " + dims_str(p.shape()) +
                           " vs " + dims_str(oshape));
        total_axis += p.dim(axis);
    }
    oshape[axis] = total_axis;
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= oshape[i];
    for (int i = axis + 1; i < r; ++i) inner *= oshape[i];
    std::vector<S> vals(static_cast<std::size_t>(numel_of(oshape)));
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t na = p.dim(axis);
        const auto pv = p.values();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(pv.data() + o * na * inner, pv.data() + (o + 1) * na * inner,
                      vals.data() + (o * total_axis + off) * inner);
        off += na;
    }
    auto out = Tensor<S>::from(std::move(oshape), std::move(vals), false);
    bool rg = false;
    if (grad_mode())
        for (const auto& p : parts) rg = rg || p.requires_grad();
    if (rg) {
        out.node()->requires_grad = true;
        std::vector<std::shared_ptr<TensorNode<S>>> ps;
        std::vector<std::int64_t> nas;
        for (const auto& p : parts) {
            ps.push_back(p.node());
            nas.push_back(p.dim(axis));
        }
        out.node()->parents = ps;
        auto* on = out.node().get();
        out.node()->backprop = [ps, nas, on, outer, inner, total_axis]() {
            std::int64_t off = 0;
            for (std::size_t pi = 0; pi < ps.size(); ++pi) {
                auto& pn = ps[pi];
                const std::int64_t na = nas[pi];
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const S* src = on->grad.data() + (o * total_axis + off) * inner;
                        S* dst = pn->grad.data() + o * na * inner;
                        for (std::int64_t i = 0; i < na * inner; ++i) dst[i] += src[i];
                    }
                }
                off += na;
            }
        };
    }
    return out;
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, int axis, std::int64_t start, std::int64_t len) {
    const int r = a.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) fail_shape("slice: axis out of range");
    if (start < 0 || len < 0 || start + len > a.dim(axis))
        fail_shape("slice: window [" + std::to_string(start) + "," + std::to_string(start + len) +
                   ") exceeds dim " + std::to_string(axis) + " of " + dims_str(a.shape()));
    Dims oshape = a.shape();
    oshape[axis] = len;
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= a.dim(i);
    const std::int64_t na = a.dim(axis);
    std::vector<S> vals(static_cast<std::size_t>(numel_of(oshape)));
    const auto av = a.values();
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy(av.data() + (o * na + start) * inner, av.data() + (o * na + start + len) * inner,
                  vals.data() + o * len * inner);
    return detail::finish_unary<S>(a, std::move(oshape), std::move(vals),
                                   [outer, inner, na, start, len](const TensorNode<S>& o, TensorNode<S>& g) {
                                       for (std::int64_t ou = 0; ou < outer; ++ou) {
                                           const S* src = o.grad.data() + ou * len * inner;
                                           S* dst = g.grad.data() + (ou * na + start) * inner;
                                           for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                                       }
                                   });
}

// Rows of `a` (axis 0) selected by index; gradient scatter-adds.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& a, const std::vector<std::int64_t>& idx) {
    if (a.rank() < 1) fail_shape("gather_rows: rank must be >= 1");
    const std::int64_t rows = a.dim(0);
    const std::int64_t inner = a.numel() / std::max<std::int64_t>(rows, 1);
    for (auto i : idx)
        if (i < 0 || i >= rows)
            fail_shape("gather_rows: index " + std::to_string(i) + " out of range [0," +
                       std::to_string(rows) + ")");
    Dims oshape = a.shape();
    oshape[0] = static_cast<std::int64_t>(idx.size());
    std::vector<S> vals(static_cast<std::size_t>(inner * idx.size()));
    const auto av = a.values();
    for (std::size_t k = 0; k < idx.size(); ++k)
        std::copy(av.data() + idx[k] * inner, av.data() + (idx[k] + 1) * inner, vals.data() + k * inner);
    return detail::finish_unary<S>(a, std::move(oshape), std::move(vals),
                                   [idx, inner](const TensorNode<S>& o, TensorNode<S>& g) {
                                       for (std::size_t k = 0; k < idx.size(); ++k) {
                                           const S* src = o.grad.data() + k * inner;
                                           S* dst = g.grad.data() + idx[k] * inner;
                                           for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                                       }
                                   });
}

}  // namespace priordet
