// Transformer encoder/decoder with the four encoder-to-decoder interaction
// strategies. All encoder layer outputs are retained; the dense interaction
// variant aggregates them into enriched maps fed to the decoder in reverse
// layer order.

#pragma once

#include "priordet/nn.hpp"

namespace priordet {

enum class InteractionStrategy { Original, Sequential, Reversed, Dfi };

inline const char* strategy_name(InteractionStrategy s) {
    switch (s) {
        case InteractionStrategy::Original: return "original";
        case InteractionStrategy::Sequential: return "sequential";
        case InteractionStrategy::Reversed: return "reversed";
        case InteractionStrategy::Dfi: return "dfi";
    }
    return "?";
}

inline InteractionStrategy strategy_from_name(const std::string& s) {
    if (s == "original") return InteractionStrategy::Original;
    if (s == "sequential") return InteractionStrategy::Sequential;
    if (s == "reversed") return InteractionStrategy::Reversed;
    if (s == "dfi") return InteractionStrategy::Dfi;
    throw std::invalid_argument("unknown interaction strategy: " + s);
}

// 2-D sinusoidal positional encoding, (H*W, D); row-major over (h, w).
// D must be divisible by 4 (sin/cos pairs for each of the two axes).
template <typename S>
Tensor<S> positional_encoding(std::int64_t H, std::int64_t W, std::int64_t D, double temperature) {
    if (D % 4 != 0)
        fail_shape("positional_encoding: model dim " + std::to_string(D) + " must be divisible by 4");
    const std::int64_t half = D / 2;
    std::vector<S> vals(static_cast<std::size_t>(H * W * D));
    std::vector<double> inv_freq(half);
    for (std::int64_t i = 0; i < half; ++i)
        inv_freq[i] = 1.0 / std::pow(temperature, 2.0 * static_cast<double>(i / 2) / static_cast<double>(half));
    for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w) {
            S* row = vals.data() + (h * W + w) * D;
            for (std::int64_t i = 0; i < half; ++i) {
                const double ay = static_cast<double>(h) * inv_freq[i];
                const double ax = static_cast<double>(w) * inv_freq[i];
                row[i] = static_cast<S>(i % 2 == 0 ? std::sin(ay) : std::cos(ay));
                row[half + i] = static_cast<S>(i % 2 == 0 ? std::sin(ax) : std::cos(ax));
            }
        }
    return Tensor<S>::from({H * W, D}, std::move(vals));
}

// ---------------------------------------------------------------------------

template <typename S>
struct MultiheadAttention {
    std::int64_t d_model = 0, heads = 0;
    Linear<S> wq, wk, wv, wo;

    MultiheadAttention() = default;
    template <typename Rng>
    MultiheadAttention(std::int64_t d, std::int64_t h, Rng& rng) : d_model(d), heads(h) {
        if (d % h != 0) fail_shape("MultiheadAttention: d_model not divisible by heads");
        wq = Linear<S>(d, d, rng);
        wk = Linear<S>(d, d, rng);
        wv = Linear<S>(d, d, rng);
        wo = Linear<S>(d, d, rng);
    }

    // q (B, Nq, D), k/v (B, Nk, D) -> (B, Nq, D)
    Tensor<S> forward(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                      Tensor<S>* attn_out = nullptr) const {
        const std::int64_t B = q.dim(0), Nq = q.dim(1), Nk = k.dim(1);
        const std::int64_t dh = d_model / heads;
        auto split = [&](const Tensor<S>& t, std::int64_t n) {
            // (B, n, D) -> (B*heads, n, dh)
            return reshape(permute(reshape(t, {B, n, heads, dh}), {0, 2, 1, 3}), {B * heads, n, dh});
        };
        auto qh = split(wq.forward(q), Nq);
        auto kh = split(wk.forward(k), Nk);
        auto vh = split(wv.forward(v), Nk);
        auto scores = mul_scalar(matmul(qh, permute(kh, {0, 2, 1})),
                                 static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))));
        auto attn = softmax(scores, 2);  // rows over keys sum to 1
        if (attn_out) *attn_out = attn;
        auto ctx = matmul(attn, vh);  // (B*heads, Nq, dh)
        auto merged = reshape(permute(reshape(ctx, {B, heads, Nq, dh}), {0, 2, 1, 3}), {B, Nq, d_model});
        return wo.forward(merged);
    }

    void params(ParamList<S>& out, const std::string& p) const {
        wq.params(out, p + ".wq");
        wk.params(out, p + ".wk");
        wv.params(out, p + ".wv");
        wo.params(out, p + ".wo");
    }
};

// Pre-norm self-attention + FFN encoder layer.
template <typename S>
struct EncoderLayer {
    LayerNorm<S> norm1, norm2;
    MultiheadAttention<S> attn;
    Linear<S> ffn_in, ffn_out;

    EncoderLayer() = default;
    template <typename Rng>
    EncoderLayer(std::int64_t d, std::int64_t heads, std::int64_t ffn_dim, Rng& rng)
        : norm1(d), norm2(d), attn(d, heads, rng), ffn_in(d, ffn_dim, rng), ffn_out(ffn_dim, d, rng) {}

    Tensor<S> forward(const Tensor<S>& x) const {
        auto h = norm1.forward(x);
        auto y = add(x, attn.forward(h, h, h));
        return add(y, ffn_out.forward(relu(ffn_in.forward(norm2.forward(y)))));
    }

    void params(ParamList<S>& out, const std::string& p) const {
        norm1.params(out, p + ".norm1");
        norm2.params(out, p + ".norm2");
        attn.params(out, p + ".attn");
        ffn_in.params(out, p + ".ffn_in");
        ffn_out.params(out, p + ".ffn_out");
    }
};

// Encoder that retains every intermediate output E^(1..L).
template <typename S>
struct Encoder {
    std::vector<EncoderLayer<S>> layers;

    Encoder() = default;
    template <typename Rng>
    Encoder(std::int64_t L, std::int64_t d, std::int64_t heads, std::int64_t ffn_dim, Rng& rng) {
        if (L < 1) fail_shape("Encoder: need at least one layer");
        for (std::int64_t i = 0; i < L; ++i) layers.emplace_back(d, heads, ffn_dim, rng);
    }

    std::vector<Tensor<S>> forward(const Tensor<S>& x) const {
        std::vector<Tensor<S>> outs;
        Tensor<S> h = x;
        for (const auto& l : layers) {
            h = l.forward(h);
            outs.push_back(h);
        }
        return outs;
    }

    void params(ParamList<S>& out, const std::string& p) const {
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].params(out, p + ".layer" + std::to_string(i));
    }
};

// ---------------------------------------------------------------------------
// Dense feature interaction: M_i = Psi(E^(i) || sum_{r>i} Gamma_r(E^(r))).
// One projection per source layer r, shared across destinations, bounds the
// parameter count at L*c^2. Psi starts as [I | 0] and Gamma at 0, so the
// aggregation is an exact identity over the reversed mapping at init.
// ---------------------------------------------------------------------------

template <typename S>
struct DfiAggregator {
    std::vector<Linear<S>> gamma;  // per source layer
    Linear<S> psi;                 // 2c -> c
    bool iterative = false;        // aggregate M_r instead of raw E^(r)

    DfiAggregator() = default;
    DfiAggregator(std::int64_t L, std::int64_t c, bool iterative_mode = false)
        : iterative(iterative_mode) {
        for (std::int64_t r = 0; r < L; ++r) gamma.push_back(Linear<S>::zeroed(c, c));
        psi = Linear<S>::zeroed(2 * c, c);
        auto wv = psi.weight.values();
        for (std::int64_t i = 0; i < c; ++i) wv[i * 2 * c + i] = S(1);
    }

    std::vector<Tensor<S>> aggregate(const std::vector<Tensor<S>>& outputs) const {
        const auto L = static_cast<std::int64_t>(outputs.size());
        if (L < 1) fail_shape("DfiAggregator: empty encoder output list");
        std::vector<Tensor<S>> M(L);
        for (std::int64_t i = L - 1; i >= 0; --i) {
            Tensor<S> agg = Tensor<S>::zeros(outputs[i].shape());
            for (std::int64_t r = i + 1; r < L; ++r) {
                const auto& src = iterative ? M[r] : outputs[r];
                agg = add(agg, gamma[r].forward(src));
            }
            M[i] = psi.forward(concat<S>({outputs[i], agg}, 2));
        }
        return M;
    }

    void params(ParamList<S>& out, const std::string& p) const {
        for (std::size_t r = 0; r < gamma.size(); ++r)
            gamma[r].params(out, p + ".gamma" + std::to_string(r));
        psi.params(out, p + ".psi");
    }
};

// K/V source for decoder layer j (1-based), per strategy.
//   Original   -> E^(L)      Sequential -> E^(j)
//   Reversed   -> E^(L-j+1)  Dfi        -> M_(L-j+1)
template <typename S>
const Tensor<S>& map_kv(InteractionStrategy strategy, const std::vector<Tensor<S>>& encoder_outputs,
                        const std::vector<Tensor<S>>& dense_maps, std::int64_t j) {
    const auto L = static_cast<std::int64_t>(encoder_outputs.size());
    if (j < 1 || j > L)
        fail_shape("map_kv: decoder layer index " + std::to_string(j) + " out of range 1.." +
                   std::to_string(L));
    switch (strategy) {
        case InteractionStrategy::Original: return encoder_outputs[L - 1];
        case InteractionStrategy::Sequential: return encoder_outputs[j - 1];
        case InteractionStrategy::Reversed: return encoder_outputs[L - j];
        case InteractionStrategy::Dfi:
            if (dense_maps.size() != encoder_outputs.size())
                fail_shape("map_kv: dense maps missing for DFI strategy");
            return dense_maps[L - j];
    }
    throw std::logic_error("map_kv: unreachable");
}

// Pre-norm decoder layer: query self-attention, cross-attention against the
// strategy-mapped memory, then FFN.
template <typename S>
struct DecoderLayer {
    LayerNorm<S> norm_sa, norm_ca, norm_ffn;
    MultiheadAttention<S> self_attn, cross_attn;
    Linear<S> ffn_in, ffn_out;

    DecoderLayer() = default;
    template <typename Rng>
    DecoderLayer(std::int64_t d, std::int64_t heads, std::int64_t ffn_dim, Rng& rng)
        : norm_sa(d), norm_ca(d), norm_ffn(d), self_attn(d, heads, rng), cross_attn(d, heads, rng),
          ffn_in(d, ffn_dim, rng), ffn_out(ffn_dim, d, rng) {}

    Tensor<S> forward(const Tensor<S>& q, const Tensor<S>& kv) const {
        auto h = norm_sa.forward(q);
        auto s = add(q, self_attn.forward(h, h, h));
        auto c = add(s, cross_attn.forward(norm_ca.forward(s), kv, kv));
        return add(c, ffn_out.forward(relu(ffn_in.forward(norm_ffn.forward(c)))));
    }

    void params(ParamList<S>& out, const std::string& p) const {
        norm_sa.params(out, p + ".norm_sa");
        norm_ca.params(out, p + ".norm_ca");
        norm_ffn.params(out, p + ".norm_ffn");
        self_attn.params(out, p + ".self_attn");
        cross_attn.params(out, p + ".cross_attn");
        ffn_in.params(out, p + ".ffn_in");
        ffn_out.params(out, p + ".ffn_out");
    }
};

template <typename S>
struct Decoder {
    std::vector<DecoderLayer<S>> layers;
    Tensor<S> query_embed;  // (num_queries, d_model), learned

    Decoder() = default;
    template <typename Rng>
    Decoder(std::int64_t L, std::int64_t num_queries, std::int64_t d, std::int64_t heads,
            std::int64_t ffn_dim, Rng& rng) {
        for (std::int64_t i = 0; i < L; ++i) layers.emplace_back(d, heads, ffn_dim, rng);
        query_embed = Tensor<S>::randn({num_queries, d}, rng, static_cast<S>(0.1), true);
    }

    // Returns the query tensor after every decoder layer.
    std::vector<Tensor<S>> forward(InteractionStrategy strategy,
                                   const std::vector<Tensor<S>>& encoder_outputs,
                                   const std::vector<Tensor<S>>& dense_maps, std::int64_t batch) const {
        const std::int64_t nq = query_embed.dim(0), d = query_embed.dim(1);
        std::vector<Tensor<S>> qs;
        // Broadcast the learned queries over the batch.
        auto q = reshape(query_embed, {1, nq, d});
        if (batch > 1) {
            std::vector<Tensor<S>> copies(static_cast<std::size_t>(batch), q);
            q = concat(copies, 0);
        }
        for (std::size_t j = 0; j < layers.size(); ++j) {
            const auto& kv = map_kv(strategy, encoder_outputs, dense_maps,
                                    static_cast<std::int64_t>(j + 1));
            q = layers[j].forward(q, kv);
            qs.push_back(q);
        }
        return qs;
    }

    void params(ParamList<S>& out, const std::string& p) const {
        add_param(out, p + ".query_embed", query_embed);
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].params(out, p + ".layer" + std::to_string(i));
    }
};

}  // namespace priordet
