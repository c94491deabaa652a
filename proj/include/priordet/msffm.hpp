// Multi-scale spatial-frequency mixer. Each pyramid level runs a dual-branch
// fusion module: a perception-aggregation convolution branch for local
// contour structure and an FFT amplitude-filter branch for global
// morphology, combined by a learnable convex weight.

#pragma once

#include "priordet/fft.hpp"
#include "priordet/nn.hpp"

namespace priordet {

struct PaConvConfig {
    std::int64_t perception_kernel = 7;  // K_p
    std::int64_t aggregate_kernel = 3;   // K_a
    std::int64_t groups = 4;             // G
    double embed_ratio = 0.25;

    std::int64_t weight_dim() const { return groups * aggregate_kernel * aggregate_kernel; }
    void validate(std::int64_t channels) const {
        if (perception_kernel <= aggregate_kernel)
            fail_shape("PaConvConfig: perception kernel must exceed aggregation kernel");
        if (channels % groups != 0)
            fail_shape("PaConvConfig: channels " + std::to_string(channels) +
                       " not divisible by groups " + std::to_string(groups));
        const auto embed = static_cast<std::int64_t>(channels * embed_ratio);
        if (embed < 1) fail_shape("PaConvConfig: embed ratio too small for channel count");
    }
};

// Perception phase: PW reduce -> large-kernel DW -> PW -> relu -> PW to the
// D = G*K_a^2 per-position kernel weights. Aggregation applies those kernels
// as a grouped dynamic convolution.
template <typename S>
struct PaConv {
    PaConvConfig cfg;
    std::int64_t channels = 0, embed = 0;
    Conv2d<S> pw_reduce, dw_large, pw_mid, pw_weights;

    PaConv() = default;
    template <typename Rng>
    PaConv(std::int64_t C, const PaConvConfig& c, Rng& rng) : cfg(c), channels(C) {
        cfg.validate(C);
        embed = static_cast<std::int64_t>(C * cfg.embed_ratio);
        pw_reduce = Conv2d<S>(C, embed, 1, rng);
        dw_large = Conv2d<S>(embed, embed, cfg.perception_kernel, rng, 1, cfg.perception_kernel / 2,
                             embed);
        pw_mid = Conv2d<S>(embed, embed, 1, rng);
        pw_weights = Conv2d<S>(embed, cfg.weight_dim(), 1, rng);
    }

    Tensor<S> perception(const Tensor<S>& x) const {
        auto h = pw_reduce.forward(x);
        h = dw_large.forward(h);
        h = relu(pw_mid.forward(h));
        return pw_weights.forward(h);  // (N, D, H, W)
    }

    Tensor<S> aggregate(const Tensor<S>& x, const Tensor<S>& w) const {
        return dynamic_group_conv(x, w, cfg.groups, cfg.aggregate_kernel);
    }

    Tensor<S> forward(const Tensor<S>& x) const { return aggregate(x, perception(x)); }

    void params(ParamList<S>& out, const std::string& p) const {
        pw_reduce.params(out, p + ".pw_reduce");
        dw_large.params(out, p + ".dw_large");
        pw_mid.params(out, p + ".pw_mid");
        pw_weights.params(out, p + ".pw_weights");
    }
};

// PAConv -> depth-wise conv -> SE gate -> FFN, with skips around the
// additive stages; the SE gate is purely multiplicative.
template <typename S>
struct SpatialBranch {
    PaConv<S> paconv;
    Conv2d<S> dw;
    Linear<S> se_fc1, se_fc2;
    Conv2d<S> ffn_in, ffn_out;

    SpatialBranch() = default;
    template <typename Rng>
    SpatialBranch(std::int64_t C, const PaConvConfig& c, Rng& rng) : paconv(C, c, rng) {
        dw = Conv2d<S>(C, C, 3, rng, 1, 1, C);
        const std::int64_t se_hidden = std::max<std::int64_t>(C / 4, 1);
        se_fc1 = Linear<S>(C, se_hidden, rng);
        se_fc2 = Linear<S>(se_hidden, C, rng);
        ffn_in = Conv2d<S>(C, 2 * C, 1, rng);
        ffn_out = Conv2d<S>(2 * C, C, 1, rng);
    }

    Tensor<S> se_gate(const Tensor<S>& x) const {
        auto pooled = mean_axis(mean_axis(x, 3), 2);  // (N, C)
        auto z = se_fc2.forward(relu(se_fc1.forward(pooled)));
        return reshape(sigmoid(z), {x.dim(0), x.dim(1), 1, 1});
    }

    Tensor<S> forward(const Tensor<S>& x) const {
        auto h = add(x, paconv.forward(x));
        h = add(h, dw.forward(h));
        h = mul(h, se_gate(h));
        h = add(h, ffn_out.forward(relu(ffn_in.forward(h))));
        return h;
    }

    // Exact-identity configuration used by the pass-through tests: dead
    // additive branches and an SE gate saturated to 1.
    void configure_identity() {
        auto zero = [](Tensor<S>& t) { std::fill(t.values().begin(), t.values().end(), S(0)); };
        zero(paconv.pw_weights.weight);
        zero(paconv.pw_weights.bias);
        zero(dw.weight);
        zero(dw.bias);
        zero(ffn_out.weight);
        zero(ffn_out.bias);
        zero(se_fc2.weight);
        std::fill(se_fc2.bias.values().begin(), se_fc2.bias.values().end(), S(1000));
    }

    void params(ParamList<S>& out, const std::string& p) const {
        paconv.params(out, p + ".paconv");
        dw.params(out, p + ".dw");
        se_fc1.params(out, p + ".se_fc1");
        se_fc2.params(out, p + ".se_fc2");
        ffn_in.params(out, p + ".ffn_in");
        ffn_out.params(out, p + ".ffn_out");
    }
};

// FFT -> learnable filter on the amplitude spectrum -> phase-preserving
// reconstruction. The filter is a PW conv + batch norm + shifted ReLU over
// amplitude maps; at init it is an exact pass-through in eval mode (identity
// PW, unit-affine BN, and the positive pre-ReLU shift keeps the
// nonlinearity inactive on nonnegative amplitudes).
template <typename S>
struct FrequencyBranch {
    Conv2d<S> pw;
    BatchNorm2d<S> bn;
    double relu_shift = 1.0;
    double residue_tol = 1e-8;

    FrequencyBranch() = default;
    template <typename Rng>
    FrequencyBranch(std::int64_t C, Rng& rng) : bn(C) {
        // near-zero BN eps keeps the eval-mode pass-through exact; amplitude
        // maps carry enough spread across bins that the variance floor never
        // matters in practice
        bn.eps = 1e-12;
        pw = Conv2d<S>(C, C, 1, rng);
        // identity 1x1 kernel
        std::fill(pw.weight.values().begin(), pw.weight.values().end(), S(0));
        for (std::int64_t c = 0; c < C; ++c) pw.weight.values()[c * C + c] = S(1);
        std::fill(pw.bias.values().begin(), pw.bias.values().end(), S(0));
        (void)rng;
    }

    Tensor<S> forward(const Tensor<S>& x, bool training) {
        auto spec = fft2(x);
        auto amp = amplitude(spec);
        auto unit_re = div(spec.re, amp);
        auto unit_im = div(spec.im, amp);
        auto filtered = bn.forward(pw.forward(amp), training);
        filtered = add_scalar(relu(add_scalar(filtered, static_cast<S>(relu_shift))),
                              static_cast<S>(-relu_shift));
        ComplexPair<S> refit{mul(filtered, unit_re), mul(filtered, unit_im)};
        auto back = ifft2(refit);

        // Hermitian symmetry of the per-bin filter keeps the output real;
        // anything beyond rounding residue means a broken recombination.
        double max_in = 0, max_im = 0;
        for (S v : x.values()) max_in = std::max(max_in, std::abs(static_cast<double>(v)));
        for (S v : back.im.values()) max_im = std::max(max_im, std::abs(static_cast<double>(v)));
        if (max_im > residue_tol * std::max(1.0, max_in))
            throw std::runtime_error("FrequencyBranch: imaginary residue " + std::to_string(max_im) +
                                     " exceeds tolerance");
        return back.re;
    }

    void params(ParamList<S>& out, const std::string& p) const {
        pw.params(out, p + ".pw");
        bn.params(out, p + ".bn");
    }
    void buffers(BufferList<S>& out, const std::string& p) { bn.buffers(out, p + ".bn"); }
};

// F(x) = alpha * spatial + (1 - alpha) * frequency, alpha learnable.
template <typename S>
Tensor<S> adaptive_fuse(const Tensor<S>& spatial, const Tensor<S>& frequency,
                        const Tensor<S>& alpha) {
    if (spatial.shape() != frequency.shape())
        fail_shape("adaptive_fuse: branch shapes differ: " + dims_str(spatial.shape()) + " vs " +
                   dims_str(frequency.shape()));
    auto one_minus = sub(Tensor<S>::filled({1}, S(1)), alpha);
    return add(mul(spatial, alpha), mul(frequency, one_minus));
}

template <typename S>
struct Dbffm {
    SpatialBranch<S> spatial;
    FrequencyBranch<S> frequency;
    Tensor<S> alpha;

    Dbffm() = default;
    template <typename Rng>
    Dbffm(std::int64_t C, const PaConvConfig& c, Rng& rng)
        : spatial(C, c, rng), frequency(C, rng) {
        alpha = Tensor<S>::filled({1}, S(0.5), true);
    }

    Tensor<S> forward(const Tensor<S>& x, bool training) {
        return adaptive_fuse(spatial.forward(x), frequency.forward(x, training), alpha);
    }

    void params(ParamList<S>& out, const std::string& p) const {
        spatial.params(out, p + ".spatial");
        frequency.params(out, p + ".frequency");
        add_param(out, p + ".alpha", alpha);
    }
    void buffers(BufferList<S>& out, const std::string& p) { frequency.buffers(out, p + ".frequency"); }
};

template <typename S>
struct FeaturePyramid {
    std::vector<Tensor<S>> levels;  // finest first, strides 8/16/32

    void validate() const {
        if (levels.size() != 3) fail_shape("FeaturePyramid: expected 3 levels");
        for (std::size_t i = 0; i + 1 < levels.size(); ++i) {
            if (levels[i].dim(2) != 2 * levels[i + 1].dim(2) ||
                levels[i].dim(3) != 2 * levels[i + 1].dim(3))
                fail_shape("FeaturePyramid: adjacent levels must differ by exactly 2x, got " +
                           dims_str(levels[i].shape()) + " then " + dims_str(levels[i + 1].shape()));
            if (levels[i].dim(1) != levels[i + 1].dim(1))
                fail_shape("FeaturePyramid: levels must be channel-aligned");
        }
    }
};

// One DBFFM per pyramid level with independent parameters.
template <typename S>
struct Msffm {
    std::vector<Dbffm<S>> modules;

    Msffm() = default;
    template <typename Rng>
    Msffm(std::int64_t C, const PaConvConfig& c, Rng& rng) {
        for (int i = 0; i < 3; ++i) modules.emplace_back(C, c, rng);
    }

    FeaturePyramid<S> forward(const FeaturePyramid<S>& in, bool training) {
        in.validate();
        FeaturePyramid<S> out;
        for (std::size_t i = 0; i < in.levels.size(); ++i)
            out.levels.push_back(modules[i].forward(in.levels[i], training));
        return out;
    }

    void params(ParamList<S>& out, const std::string& p) const {
        for (std::size_t i = 0; i < modules.size(); ++i)
            modules[i].params(out, p + ".level" + std::to_string(i));
    }
    void buffers(BufferList<S>& out, const std::string& p) {
        for (std::size_t i = 0; i < modules.size(); ++i)
            modules[i].buffers(out, p + ".level" + std::to_string(i));
    }
};

}  // namespace priordet
