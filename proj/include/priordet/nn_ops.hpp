// Structured network ops: convolution (im2col + Eigen), softmax, norms,
// bilinear grid sampling and the per-position dynamic grouped convolution.

#pragma once

#include "priordet/ops.hpp"

namespace priordet {

namespace detail {

template <typename S>
void im2col(const S* x, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t Ho, std::int64_t Wo,
            S* cols) {
    // cols is (C*kh*kw, Ho*Wo) row-major
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < kh; ++i)
            for (std::int64_t j = 0; j < kw; ++j) {
                S* row = cols + ((c * kh + i) * kw + j) * (Ho * Wo);
                for (std::int64_t oh = 0; oh < Ho; ++oh) {
                    const std::int64_t ih = oh * stride + i - pad;
                    for (std::int64_t ow = 0; ow < Wo; ++ow) {
                        const std::int64_t iw = ow * stride + j - pad;
                        row[oh * Wo + ow] = (ih >= 0 && ih < H && iw >= 0 && iw < W)
                                                ? x[(c * H + ih) * W + iw]
                                                : S(0);
                    }
                }
            }
}

template <typename S>
void col2im_accum(const S* cols, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
                  std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t Ho,
                  std::int64_t Wo, S* x) {
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < kh; ++i)
            for (std::int64_t j = 0; j < kw; ++j) {
                const S* row = cols + ((c * kh + i) * kw + j) * (Ho * Wo);
                for (std::int64_t oh = 0; oh < Ho; ++oh) {
                    const std::int64_t ih = oh * stride + i - pad;
                    if (ih < 0 || ih >= H) continue;
                    for (std::int64_t ow = 0; ow < Wo; ++ow) {
                        const std::int64_t iw = ow * stride + j - pad;
                        if (iw >= 0 && iw < W) x[(c * H + ih) * W + iw] += row[oh * Wo + ow];
                    }
                }
            }
}

}  // namespace detail

// Cross-correlation, NCHW input and OIKK kernel; grouped form covers
// depth-wise and point-wise as special cases.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, std::int64_t stride = 1,
                 std::int64_t pad = 0, std::int64_t groups = 1, const Tensor<S>& bias = Tensor<S>()) {
    if (x.rank() != 4) fail_shape("conv2d: input must be NCHW, got " + dims_str(x.shape()));
    if (w.rank() != 4) fail_shape("conv2d: kernel must be OIKK, got " + dims_str(w.shape()));
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t O = w.dim(0), Ig = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (C % groups != 0)
        fail_shape("conv2d: input channels " + std::to_string(C) + " not divisible by groups " +
                   std::to_string(groups));
    if (O % groups != 0)
        fail_shape("conv2d: output channels " + std::to_string(O) + " not divisible by groups " +
                   std::to_string(groups));
    if (Ig != C / groups)
        fail_shape("conv2d: kernel in-channel dim " + std::to_string(Ig) + " != input channels/groups " +
                   std::to_string(C / groups));
    if (H + 2 * pad < kh || W + 2 * pad < kw)
        fail_shape("conv2d: spatial dims " + std::to_string(H) + "x" + std::to_string(W) +
                   " (pad " + std::to_string(pad) + ") smaller than kernel " + std::to_string(kh) +
                   "x" + std::to_string(kw));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O))
        fail_shape("conv2d: bias shape " + dims_str(bias.shape()) + " != (O)");
    const std::int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    const std::int64_t Og = O / groups, Cg = C / groups, colrows = Cg * kh * kw;

    std::vector<S> vals(static_cast<std::size_t>(N * O * Ho * Wo));
    std::vector<S> cols(static_cast<std::size_t>(colrows * Ho * Wo));
    const S* xp = x.values().data();
    const S* wp = w.values().data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t g = 0; g < groups; ++g) {
            detail::im2col(xp + (n * C + g * Cg) * H * W, Cg, H, W, kh, kw, stride, pad, Ho, Wo,
                           cols.data());
            Eigen::Map<const EMat<S>> mw(wp + g * Og * colrows, Og, colrows);
            Eigen::Map<const EMat<S>> mc(cols.data(), colrows, Ho * Wo);
            Eigen::Map<EMat<S>> mo(vals.data() + (n * O + g * Og) * Ho * Wo, Og, Ho * Wo);
            mo.noalias() = mw * mc;
        }
    if (bias.defined()) {
        const S* bp = bias.values().data();
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t o = 0; o < O; ++o) {
                S* dst = vals.data() + (n * O + o) * Ho * Wo;
                for (std::int64_t i = 0; i < Ho * Wo; ++i) dst[i] += bp[o];
            }
    }

    auto out = Tensor<S>::from({N, O, Ho, Wo}, std::move(vals), false);
    const bool rg = grad_mode() && (x.requires_grad() || w.requires_grad() ||
                                    (bias.defined() && bias.requires_grad()));
    if (rg) {
        out.node()->requires_grad = true;
        out.node()->parents = {x.node(), w.node()};
        if (bias.defined()) out.node()->parents.push_back(bias.node());
        auto xn = x.node();
        auto wn = w.node();
        auto bn = bias.defined() ? bias.node() : nullptr;
        auto* on = out.node().get();
        out.node()->backprop = [=]() {
            std::vector<S> cols(static_cast<std::size_t>(colrows * Ho * Wo));
            const S* gp = on->grad.data();
            if (xn->requires_grad) xn->ensure_grad();
            if (wn->requires_grad) wn->ensure_grad();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t g = 0; g < groups; ++g) {
                    Eigen::Map<const EMat<S>> mg(gp + (n * O + g * Og) * Ho * Wo, Og, Ho * Wo);
                    if (wn->requires_grad) {
                        detail::im2col(xn->value.data() + (n * C + g * Cg) * H * W, Cg, H, W, kh, kw,
                                       stride, pad, Ho, Wo, cols.data());
                        Eigen::Map<const EMat<S>> mc(cols.data(), colrows, Ho * Wo);
                        Eigen::Map<EMat<S>> mdw(wn->grad.data() + g * Og * colrows, Og, colrows);
                        mdw.noalias() += mg * mc.transpose();
                    }
                    if (xn->requires_grad) {
                        Eigen::Map<const EMat<S>> mw(wn->value.data() + g * Og * colrows, Og, colrows);
                        Eigen::Map<EMat<S>> mdc(cols.data(), colrows, Ho * Wo);
                        mdc.noalias() = mw.transpose() * mg;
                        detail::col2im_accum(cols.data(), Cg, H, W, kh, kw, stride, pad, Ho, Wo,
                                             xn->grad.data() + (n * C + g * Cg) * H * W);
                    }
                }
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t o = 0; o < O; ++o) {
                        const S* src = gp + (n * O + o) * Ho * Wo;
                        S acc = S(0);
                        for (std::int64_t i = 0; i < Ho * Wo; ++i) acc += src[i];
                        bn->grad[o] += acc;
                    }
            }
        };
    }
    return out;
}

// Softmax along one axis; rows sum to 1.
template <typename S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
    if (axis < 0) axis += a.rank();
    if (axis < 0 || axis >= a.rank()) fail_shape("softmax: axis out of range");
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    const std::int64_t n = a.dim(axis);
    std::vector<S> vals(static_cast<std::size_t>(a.numel()));
    const auto av = a.values();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
            S mx = -std::numeric_limits<S>::infinity();
            for (std::int64_t k = 0; k < n; ++k) mx = std::max(mx, av[(o * n + k) * inner + i]);
            S z = S(0);
            for (std::int64_t k = 0; k < n; ++k) {
                const S e = std::exp(av[(o * n + k) * inner + i] - mx);
                vals[(o * n + k) * inner + i] = e;
                z += e;
            }
            const S invz = S(1) / z;
            for (std::int64_t k = 0; k < n; ++k) vals[(o * n + k) * inner + i] *= invz;
        }
    return detail::finish_unary<S>(
        a, a.shape(), std::move(vals), [outer, n, inner](const TensorNode<S>& o, TensorNode<S>& g) {
            for (std::int64_t ou = 0; ou < outer; ++ou)
                for (std::int64_t i = 0; i < inner; ++i) {
                    S dot = S(0);
                    for (std::int64_t k = 0; k < n; ++k) {
                        const auto ix = (ou * n + k) * inner + i;
                        dot += o.grad[ix] * o.value[ix];
                    }
                    for (std::int64_t k = 0; k < n; ++k) {
                        const auto ix = (ou * n + k) * inner + i;
                        g.grad[ix] += o.value[ix] * (o.grad[ix] - dot);
                    }
                }
        });
}

// Layer norm over the last dim with learned affine.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     double eps = 1e-5) {
    const std::int64_t n = x.dim(-1);
    if (gamma.numel() != n || beta.numel() != n)
        fail_shape("layer_norm: affine params must match last dim " + std::to_string(n));
    const std::int64_t rows = x.numel() / n;
    std::vector<S> vals(static_cast<std::size_t>(x.numel()));
    std::vector<S> xhat(static_cast<std::size_t>(x.numel()));
    std::vector<S> invstd(static_cast<std::size_t>(rows));
    const auto xv = x.values();
    const auto gv = gamma.values();
    const auto bv = beta.values();
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* xr = xv.data() + r * n;
        S m = S(0);
        for (std::int64_t i = 0; i < n; ++i) m += xr[i];
        m /= static_cast<S>(n);
        S v = S(0);
        for (std::int64_t i = 0; i < n; ++i) v += (xr[i] - m) * (xr[i] - m);
        v /= static_cast<S>(n);
        const S is = S(1) / std::sqrt(v + static_cast<S>(eps));
        invstd[r] = is;
        for (std::int64_t i = 0; i < n; ++i) {
            const S xh = (xr[i] - m) * is;
            xhat[r * n + i] = xh;
            vals[r * n + i] = xh * gv[i] + bv[i];
        }
    }
    auto out = Tensor<S>::from(x.shape(), std::move(vals), false);
    const bool rg =
        grad_mode() && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    if (rg) {
        out.node()->requires_grad = true;
        out.node()->parents = {x.node(), gamma.node(), beta.node()};
        auto xn = x.node();
        auto gn = gamma.node();
        auto bn = beta.node();
        auto* on = out.node().get();
        out.node()->backprop = [xn, gn, bn, on, rows, n, xhat = std::move(xhat),
                                invstd = std::move(invstd)]() {
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const S* gy = on->grad.data() + r * n;
                const S* xh = xhat.data() + r * n;
                if (gn->requires_grad)
                    for (std::int64_t i = 0; i < n; ++i) gn->grad[i] += gy[i] * xh[i];
                if (bn->requires_grad)
                    for (std::int64_t i = 0; i < n; ++i) bn->grad[i] += gy[i];
                if (xn->requires_grad) {
                    S s1 = S(0), s2 = S(0);
                    for (std::int64_t i = 0; i < n; ++i) {
                        const S dxh = gy[i] * gn->value[i];
                        s1 += dxh;
                        s2 += dxh * xh[i];
                    }
                    const S invn = S(1) / static_cast<S>(n);
                    for (std::int64_t i = 0; i < n; ++i) {
                        const S dxh = gy[i] * gn->value[i];
                        xn->grad[r * n + i] += invstd[r] * (dxh - s1 * invn - xh[i] * s2 * invn);
                    }
                }
            }
        };
    }
    return out;
}

// Batch norm over (N, H, W) per channel for NCHW input. Running statistics
// are plain state owned by the caller; training mode uses batch statistics
// and updates them, eval mode is a fixed per-channel affine map.
template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     std::vector<S>& running_mean, std::vector<S>& running_var, bool training,
                     double momentum = 0.1, double eps = 1e-5) {
    if (x.rank() != 4) fail_shape("batch_norm: input must be NCHW, got " + dims_str(x.shape()));
    const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (gamma.numel() != C || beta.numel() != C ||
        static_cast<std::int64_t>(running_mean.size()) != C ||
        static_cast<std::int64_t>(running_var.size()) != C)
        fail_shape("batch_norm: per-channel params must have size " + std::to_string(C));
    const std::int64_t m = N * HW;
    const auto xv = x.values();
    const auto gv = gamma.values();
    const auto bv = beta.values();
    std::vector<S> mu(C), var(C);
    if (training) {
        for (std::int64_t c = 0; c < C; ++c) {
            S s = S(0);
            for (std::int64_t n = 0; n < N; ++n) {
                const S* p = xv.data() + (n * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) s += p[i];
            }
            mu[c] = s / static_cast<S>(m);
            S v = S(0);
            for (std::int64_t n = 0; n < N; ++n) {
                const S* p = xv.data() + (n * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) v += (p[i] - mu[c]) * (p[i] - mu[c]);
            }
            var[c] = v / static_cast<S>(m);
            running_mean[c] = static_cast<S>((1 - momentum) * running_mean[c] + momentum * mu[c]);
            running_var[c] = static_cast<S>((1 - momentum) * running_var[c] + momentum * var[c]);
        }
    } else {
        mu.assign(running_mean.begin(), running_mean.end());
        var.assign(running_var.begin(), running_var.end());
    }
    std::vector<S> invstd(C);
    for (std::int64_t c = 0; c < C; ++c) invstd[c] = S(1) / std::sqrt(var[c] + static_cast<S>(eps));
    std::vector<S> vals(static_cast<std::size_t>(x.numel()));
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const S* p = xv.data() + (n * C + c) * HW;
            S* q = vals.data() + (n * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) q[i] = (p[i] - mu[c]) * invstd[c] * gv[c] + bv[c];
        }
    auto out = Tensor<S>::from(x.shape(), std::move(vals), false);
    const bool rg =
        grad_mode() && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    if (rg) {
        out.node()->requires_grad = true;
        out.node()->parents = {x.node(), gamma.node(), beta.node()};
        auto xn = x.node();
        auto gn = gamma.node();
        auto bn = beta.node();
        auto* on = out.node().get();
        out.node()->backprop = [xn, gn, bn, on, N, C, HW, m, training, mu = std::move(mu),
                                invstd = std::move(invstd)]() {
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (std::int64_t c = 0; c < C; ++c) {
                S dg = S(0), db = S(0);
                for (std::int64_t n = 0; n < N; ++n) {
                    const S* gy = on->grad.data() + (n * C + c) * HW;
                    const S* xp = xn->value.data() + (n * C + c) * HW;
                    for (std::int64_t i = 0; i < HW; ++i) {
                        const S xh = (xp[i] - mu[c]) * invstd[c];
                        dg += gy[i] * xh;
                        db += gy[i];
                    }
                }
                if (gn->requires_grad) gn->grad[c] += dg;
                if (bn->requires_grad) bn->grad[c] += db;
                if (!xn->requires_grad) continue;
                if (!training) {
                    const S k = gn->value[c] * invstd[c];
                    for (std::int64_t n = 0; n < N; ++n) {
                        const S* gy = on->grad.data() + (n * C + c) * HW;
                        S* dx = xn->grad.data() + (n * C + c) * HW;
                        for (std::int64_t i = 0; i < HW; ++i) dx[i] += gy[i] * k;
                    }
                } else {
                    // dxhat = gy * gamma; dx via the standard train-mode formula
                    const S g = gn->value[c];
                    const S invm = S(1) / static_cast<S>(m);
                    // dg holds sum(gy*xhat), db holds sum(gy)
                    for (std::int64_t n = 0; n < N; ++n) {
                        const S* gy = on->grad.data() + (n * C + c) * HW;
                        const S* xp = xn->value.data() + (n * C + c) * HW;
                        S* dx = xn->grad.data() + (n * C + c) * HW;
                        for (std::int64_t i = 0; i < HW; ++i) {
                            const S xh = (xp[i] - mu[c]) * invstd[c];
                            dx[i] += g * invstd[c] * (gy[i] - db * invm - xh * dg * invm);
                        }
                    }
                }
            }
        };
    }
    return out;
}

// Bilinear sampling of NCHW features at continuous pixel locations.
// loc is (N, P, 2) with (x, y) order; out-of-bounds reads are zero.
// Differentiable w.r.t. both the feature values and the locations.
template <typename S>
Tensor<S> bilinear_sample(const Tensor<S>& feat, const Tensor<S>& loc) {
    if (feat.rank() != 4) fail_shape("bilinear_sample: feature must be NCHW");
    if (loc.rank() != 3 || loc.dim(2) != 2)
        fail_shape("bilinear_sample: locations must be (N, P, 2), got " + dims_str(loc.shape()));
    if (loc.dim(0) != feat.dim(0))
        fail_shape("bilinear_sample: batch mismatch " + std::to_string(loc.dim(0)) + " vs " +
                   std::to_string(feat.dim(0)));
    const std::int64_t N = feat.dim(0), C = feat.dim(1), H = feat.dim(2), W = feat.dim(3);
    const std::int64_t P = loc.dim(1);
    std::vector<S> vals(static_cast<std::size_t>(N * C * P), S(0));
    const auto fv = feat.values();
    const auto lv = loc.values();
    auto read = [&](std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) -> S {
        if (h < 0 || h >= H || w < 0 || w >= W) return S(0);
        return fv[((n * C + c) * H + h) * W + w];
    };
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t p = 0; p < P; ++p) {
            const S xf = lv[(n * P + p) * 2 + 0];
            const S yf = lv[(n * P + p) * 2 + 1];
            const std::int64_t x0 = static_cast<std::int64_t>(std::floor(xf));
            const std::int64_t y0 = static_cast<std::int64_t>(std::floor(yf));
            const S fx = xf - static_cast<S>(x0);
            const S fy = yf - static_cast<S>(y0);
            for (std::int64_t c = 0; c < C; ++c) {
                const S v00 = read(n, c, y0, x0), v01 = read(n, c, y0, x0 + 1);
                const S v10 = read(n, c, y0 + 1, x0), v11 = read(n, c, y0 + 1, x0 + 1);
                vals[(n * C + c) * P + p] = (S(1) - fy) * ((S(1) - fx) * v00 + fx * v01) +
                                            fy * ((S(1) - fx) * v10 + fx * v11);
            }
        }
    auto out = Tensor<S>::from({N, C, P}, std::move(vals), false);
    const bool rg = grad_mode() && (feat.requires_grad() || loc.requires_grad());
    if (rg) {
        out.node()->requires_grad = true;
        out.node()->parents = {feat.node(), loc.node()};
        auto fn = feat.node();
        auto ln = loc.node();
        auto* on = out.node().get();
        out.node()->backprop = [fn, ln, on, N, C, H, W, P]() {
            if (fn->requires_grad) fn->ensure_grad();
            if (ln->requires_grad) ln->ensure_grad();
            auto read = [&](std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) -> S {
                if (h < 0 || h >= H || w < 0 || w >= W) return S(0);
                return fn->value[((n * C + c) * H + h) * W + w];
            };
            auto scatter = [&](std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w, S g) {
                if (h < 0 || h >= H || w < 0 || w >= W) return;
                fn->grad[((n * C + c) * H + h) * W + w] += g;
            };
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t p = 0; p < P; ++p) {
                    const S xf = ln->value[(n * P + p) * 2 + 0];
                    const S yf = ln->value[(n * P + p) * 2 + 1];
                    const std::int64_t x0 = static_cast<std::int64_t>(std::floor(xf));
                    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(yf));
                    const S fx = xf - static_cast<S>(x0);
                    const S fy = yf - static_cast<S>(y0);
                    S dx = S(0), dy = S(0);
                    for (std::int64_t c = 0; c < C; ++c) {
                        const S g = on->grad[(n * C + c) * P + p];
                        if (g == S(0)) continue;
                        const S v00 = read(n, c, y0, x0), v01 = read(n, c, y0, x0 + 1);
                        const S v10 = read(n, c, y0 + 1, x0), v11 = read(n, c, y0 + 1, x0 + 1);
                        if (fn->requires_grad) {
                            scatter(n, c, y0, x0, g * (S(1) - fy) * (S(1) - fx));
                            scatter(n, c, y0, x0 + 1, g * (S(1) - fy) * fx);
                            scatter(n, c, y0 + 1, x0, g * fy * (S(1) - fx));
                            scatter(n, c, y0 + 1, x0 + 1, g * fy * fx);
                        }
                        dx += g * ((S(1) - fy) * (v01 - v00) + fy * (v11 - v10));
                        dy += g * ((S(1) - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                    if (ln->requires_grad) {
                        ln->grad[(n * P + p) * 2 + 0] += dx;
                        ln->grad[(n * P + p) * 2 + 1] += dy;
                    }
                }
        };
    }
    return out;
}

// Per-position grouped dynamic convolution. w is (N, D, H, W) with
// D = G*k*k; at every position the D weights form G k-by-k kernels shared by
// the channels of each group. Zero padding at borders.
template <typename S>
Tensor<S> dynamic_group_conv(const Tensor<S>& x, const Tensor<S>& w, std::int64_t G, std::int64_t k) {
    if (x.rank() != 4 || w.rank() != 4) fail_shape("dynamic_group_conv: inputs must be NCHW");
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t D = w.dim(1);
    if (D != G * k * k)
        fail_shape("dynamic_group_conv: weight channels " + std::to_string(D) + " != G*k*k = " +
                   std::to_string(G * k * k));
    if (w.dim(0) != N || w.dim(2) != H || w.dim(3) != W)
        fail_shape("dynamic_group_conv: weight map " + dims_str(w.shape()) +
                   " does not match input " + dims_str(x.shape()));
    if (C % G != 0)
        fail_shape("dynamic_group_conv: channels " + std::to_string(C) + " not divisible by groups " +
                   std::to_string(G));
    const std::int64_t Cg = C / G, c0 = k / 2;
    std::vector<S> vals(static_cast<std::size_t>(x.numel()), S(0));
    const auto xv = x.values();
    const auto wv = w.values();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t g = 0; g < G; ++g)
            for (std::int64_t cc = 0; cc < Cg; ++cc) {
                const std::int64_t c = g * Cg + cc;
                for (std::int64_t h = 0; h < H; ++h)
                    for (std::int64_t ww = 0; ww < W; ++ww) {
                        S acc = S(0);
                        for (std::int64_t i = 0; i < k; ++i) {
                            const std::int64_t ih = h + i - c0;
                            if (ih < 0 || ih >= H) continue;
                            for (std::int64_t j = 0; j < k; ++j) {
                                const std::int64_t iw = ww + j - c0;
                                if (iw < 0 || iw >= W) continue;
                                const S kw = wv[((n * D + g * k * k + i * k + j) * H + h) * W + ww];
                                acc += kw * xv[((n * C + c) * H + ih) * W + iw];
                            }
                        }
                        vals[((n * C + c) * H + h) * W + ww] = acc;
                    }
            }
    auto out = Tensor<S>::from(x.shape(), std::move(vals), false);
    const bool rg = grad_mode() && (x.requires_grad() || w.requires_grad());
    if (rg) {
        out.node()->requires_grad = true;
        out.node()->parents = {x.node(), w.node()};
        auto xn = x.node();
        auto wn = w.node();
        auto* on = out.node().get();
        out.node()->backprop = [xn, wn, on, N, C, H, W, G, Cg, D, k, c0]() {
            if (xn->requires_grad) xn->ensure_grad();
            if (wn->requires_grad) wn->ensure_grad();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t g = 0; g < G; ++g)
                    for (std::int64_t cc = 0; cc < Cg; ++cc) {
                        const std::int64_t c = g * Cg + cc;
                        for (std::int64_t h = 0; h < H; ++h)
                            for (std::int64_t ww = 0; ww < W; ++ww) {
                                const S gy = on->grad[((n * C + c) * H + h) * W + ww];
                                if (gy == S(0)) continue;
                                for (std::int64_t i = 0; i < k; ++i) {
                                    const std::int64_t ih = h + i - c0;
                                    if (ih < 0 || ih >= H) continue;
                                    for (std::int64_t j = 0; j < k; ++j) {
                                        const std::int64_t iw = ww + j - c0;
                                        if (iw < 0 || iw >= W) continue;
                                        const auto wix =
                                            ((n * D + g * k * k + i * k + j) * H + h) * W + ww;
                                        const auto xix = ((n * C + c) * H + ih) * W + iw;
                                        if (wn->requires_grad)
                                            wn->grad[wix] += gy * xn->value[xix];
                                        if (xn->requires_grad)
                                            xn->grad[xix] += gy * wn->value[wix];
                                    }
                                }
                            }
                    }
        };
    }
    return out;
}

}  // namespace priordet
