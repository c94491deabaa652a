// SDFPR: deformable sampling whose offsets are modulated and clamped by
// factors drawn from the geometry prior, followed by a Mix FFN. Offsets are
// kept per (position, group, kernel point) with (x, y) in pixel units.
//
// Pipeline per forward:
//   base  = (pred + grid) * sigmoid(scale) * s_max
//   mod   = (dx * w~, dy * w~ * r~)            per offset group
//   final = clamp(mod, +-w~*s_max, +-w~*r~*s_max)
//   out   = W_o( sum_k softmax(point_logits)_k * sample(x, p0 + final) )

#pragma once

#include "priordet/gmm.hpp"
#include "priordet/nn.hpp"

namespace priordet {

template <typename S>
struct OffsetField {
    Tensor<S> raw;        // network prediction, (N, L, G, K, 2)
    Tensor<S> base;       // after grid + sigmoid scaling
    Tensor<S> modulated;  // after prior modulation
    Tensor<S> final;      // after clamping
    Tensor<S> scale_logits;  // (N, L, G)
};

struct SdfprConfig {
    std::int64_t kernel_points = 9;  // K, a perfect odd square
    double s_max = 4.0;              // max sampling radius in pixels
    std::int64_t groups = 4;         // offset groups
    double droppath_keep = 1.0;
    double ffn_ratio = 2.0;
    bool modulation_enabled = true;
    bool resample_each_forward = true;  // freeze via flag; Alg. samples per pass
    FactorBounds bounds;
};

// Canonical kernel-point grid centered at 0, (K, 2) in (x, y) order.
template <typename S>
Tensor<S> kernel_grid(std::int64_t K) {
    const auto k = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(K))));
    if (k * k != K || k % 2 == 0)
        fail_shape("kernel_grid: K must be the square of an odd number, got " + std::to_string(K));
    std::vector<S> g(static_cast<std::size_t>(K * 2));
    const std::int64_t half = k / 2;
    std::int64_t idx = 0;
    for (std::int64_t dy = -half; dy <= half; ++dy)
        for (std::int64_t dx = -half; dx <= half; ++dx) {
            g[idx * 2 + 0] = static_cast<S>(dx);
            g[idx * 2 + 1] = static_cast<S>(dy);
            ++idx;
        }
    return Tensor<S>::from({K, 2}, std::move(g));
}

// base = (pred + grid) * sigmoid(scale_logits) * s_max, elementwise.
template <typename S>
Tensor<S> compute_base_offsets(const Tensor<S>& pred, const Tensor<S>& scale_logits,
                               const Tensor<S>& grid, double s_max) {
    if (pred.rank() != 5 || pred.dim(4) != 2)
        fail_shape("compute_base_offsets: pred must be (N, L, G, K, 2)");
    if (grid.rank() != 2 || grid.dim(0) != pred.dim(3) || grid.dim(1) != 2)
        fail_shape("compute_base_offsets: grid must be (K, 2) matching pred");
    auto sig = reshape(sigmoid(scale_logits), {pred.dim(0), pred.dim(1), pred.dim(2), 1, 1});
    return mul_scalar(mul(add(pred, grid), sig), static_cast<S>(s_max));
}

// Eqs. modulate-then-clamp. One factor pair per offset group; bounds scale
// with s_max so they live in pixel units like the offsets themselves.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> modulate_and_clamp(const Tensor<S>& base,
                                                   const std::vector<PriorFactors>& factors,
                                                   double s_max) {
    if (base.rank() != 5 || base.dim(4) != 2)
        fail_shape("modulate_and_clamp: base must be (N, L, G, K, 2)");
    const std::int64_t G = base.dim(2);
    if (static_cast<std::int64_t>(factors.size()) != G)
        fail_shape("modulate_and_clamp: expected " + std::to_string(G) + " factor pairs, got " +
                   std::to_string(factors.size()));
    std::vector<S> scale(static_cast<std::size_t>(G * 2)), bound(static_cast<std::size_t>(G * 2));
    for (std::int64_t g = 0; g < G; ++g) {
        const auto& f = factors[g];
        if (!(f.w_tilde > 0) || !(f.r_tilde > 0) || !std::isfinite(f.w_tilde) ||
            !std::isfinite(f.r_tilde))
            throw std::invalid_argument("modulate_and_clamp: factors must be finite and positive");
        scale[g * 2 + 0] = static_cast<S>(f.w_tilde);
        scale[g * 2 + 1] = static_cast<S>(f.w_tilde * f.r_tilde);
        bound[g * 2 + 0] = static_cast<S>(f.w_tilde * s_max);
        bound[g * 2 + 1] = static_cast<S>(f.w_tilde * f.r_tilde * s_max);
    }
    auto scale_t = Tensor<S>::from({1, 1, G, 1, 2}, std::move(scale));
    auto bound_t = Tensor<S>::from({1, 1, G, 1, 2}, std::move(bound));
    auto modulated = mul(base, scale_t);
    auto final_t = clamp_sym(modulated, bound_t);
    return {modulated, final_t};
}

template <typename S>
struct PriorDcn {
    std::int64_t channels = 0, groups = 0, K = 0;
    double s_max = 4.0;
    bool modulation_enabled = true;
    Linear<S> offset_head;   // C -> G*K*2, zero init: sampling starts on the grid
    Linear<S> scale_head;    // C -> G, zero init
    Tensor<S> point_logits;  // (G, K), zero init -> uniform aggregation
    Linear<S> out_proj;      // C -> C
    Tensor<S> grid;          // (K, 2)

    PriorDcn() = default;
    template <typename Rng>
    PriorDcn(std::int64_t C, const SdfprConfig& cfg, Rng& rng)
        : channels(C),
          groups(cfg.groups),
          K(cfg.kernel_points),
          s_max(cfg.s_max),
          modulation_enabled(cfg.modulation_enabled) {
        if (C % groups != 0)
            fail_shape("PriorDcn: channels " + std::to_string(C) + " not divisible by groups " +
                       std::to_string(groups));
        offset_head = Linear<S>::zeroed(C, groups * K * 2);
        scale_head = Linear<S>::zeroed(C, groups);
        point_logits = Tensor<S>::zeros({groups, K}, true);
        out_proj = Linear<S>(C, C, rng);
        grid = kernel_grid<S>(K);
    }

    Tensor<S> forward(const Tensor<S>& x, std::int64_t H, std::int64_t W,
                      const std::vector<PriorFactors>& factors,
                      OffsetField<S>* trace = nullptr) const {
        if (x.rank() != 3) fail_shape("PriorDcn: input must be (N, L, C)");
        const std::int64_t N = x.dim(0), L = x.dim(1), C = x.dim(2);
        if (L != H * W)
            fail_shape("PriorDcn: sequence length " + std::to_string(L) + " != H*W = " +
                       std::to_string(H * W));
        if (C != channels) fail_shape("PriorDcn: channel dim mismatch");
        const std::int64_t G = groups, Cg = C / G;

        auto pred = reshape(offset_head.forward(x), {N, L, G, K, 2});
        auto scale_logits = reshape(scale_head.forward(x), {N, L, G});
        auto base = compute_base_offsets(pred, scale_logits, grid, s_max);
        Tensor<S> modulated, final_t;
        if (modulation_enabled) {
            auto mc = modulate_and_clamp(base, factors, s_max);
            modulated = mc.first;
            final_t = mc.second;
        } else {
            modulated = base;
            final_t = base;
        }
        if (trace) *trace = {pred, base, modulated, final_t, scale_logits};

        // Absolute sampling locations: p0 + offset, (x, y) in pixels.
        std::vector<S> p0(static_cast<std::size_t>(L * 2));
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w) {
                p0[(h * W + w) * 2 + 0] = static_cast<S>(w);
                p0[(h * W + w) * 2 + 1] = static_cast<S>(h);
            }
        auto locations = add(final_t, Tensor<S>::from({1, L, 1, 1, 2}, std::move(p0)));

        auto feat = reshape(permute(x, {0, 2, 1}), {N * G, Cg, H, W});
        auto loc = reshape(permute(locations, {0, 2, 1, 3, 4}), {N * G, L * K, 2});
        auto gathered = reshape(bilinear_sample(feat, loc), {N, G, Cg, L, K});
        auto wts = reshape(softmax(point_logits, 1), {G, 1, 1, K});
        auto mixed = sum_axis(mul(gathered, wts), 4);           // (N, G, Cg, L)
        auto tokens = reshape(permute(mixed, {0, 3, 1, 2}), {N, L, C});
        return out_proj.forward(tokens);
    }

    void params(ParamList<S>& out, const std::string& p) const {
        offset_head.params(out, p + ".offset_head");
        scale_head.params(out, p + ".scale_head");
        add_param(out, p + ".point_logits", point_logits);
        out_proj.params(out, p + ".out_proj");
    }
};

// Prior DCN block plus Mix FFN, both behind pre-norm residuals with DropPath.
template <typename S>
struct SdfprBlock {
    SdfprConfig cfg;
    PriorDcn<S> dcn;
    LayerNorm<S> norm1, norm2;
    Linear<S> ffn_in, ffn_out;
    // Prior source; when absent the block runs with neutral factors.
    std::shared_ptr<const GmmPrior2D> prior;
    std::vector<PriorFactors> frozen_factors;

    SdfprBlock() = default;
    template <typename Rng>
    SdfprBlock(std::int64_t C, const SdfprConfig& c, Rng& rng)
        : cfg(c), dcn(C, c, rng), norm1(C), norm2(C) {
        const auto hidden = static_cast<std::int64_t>(static_cast<double>(C) * c.ffn_ratio);
        ffn_in = Linear<S>(C, hidden, rng);
        ffn_out = Linear<S>(hidden, C, rng);
        frozen_factors.assign(c.groups, PriorFactors{});
    }

    std::vector<PriorFactors> draw_factors(const TrainContext& ctx) const {
        if (!prior || !cfg.resample_each_forward || !ctx.rng) return frozen_factors;
        std::vector<PriorFactors> out;
        auto draws = sample_prior(*prior, *ctx.rng, static_cast<int>(cfg.groups));
        out.reserve(draws.size());
        for (const auto& d : draws)
            out.push_back(normalize_factors(d[0], d[1], prior->w_ref, cfg.bounds));
        return out;
    }

    Tensor<S> forward(const Tensor<S>& x, std::int64_t H, std::int64_t W, const TrainContext& ctx,
                      OffsetField<S>* trace = nullptr) const {
        const auto factors = draw_factors(ctx);
        auto y = add(x, droppath(dcn.forward(norm1.forward(x), H, W, factors, trace),
                                 cfg.droppath_keep, ctx));
        auto z = add(y, droppath(ffn_out.forward(relu(ffn_in.forward(norm2.forward(y)))),
                                 cfg.droppath_keep, ctx));
        return z;
    }

    void params(ParamList<S>& out, const std::string& p) const {
        dcn.params(out, p + ".dcn");
        norm1.params(out, p + ".norm1");
        norm2.params(out, p + ".norm2");
        ffn_in.params(out, p + ".ffn_in");
        ffn_out.params(out, p + ".ffn_out");
    }
};

}  // namespace priordet
