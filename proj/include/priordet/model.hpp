// Full detector assembly: tiny 3-stage CNN backbone with SDFPR blocks,
// channel-aligned pyramid through MSFFM, transformer encoder, strategy-mapped
// decoder and set-prediction heads. Plus the training loop, inference-time
// detection extraction and checkpoint IO.

#pragma once

#include "priordet/config.hpp"
#include "priordet/detection.hpp"
#include "priordet/eval.hpp"
#include "priordet/msffm.hpp"
#include "priordet/sdfpr.hpp"
#include "priordet/synth.hpp"
#include "priordet/transformer.hpp"

namespace priordet {

template <typename S>
struct BackboneStage {
    Conv2d<S> down, c1, c2;
    BatchNorm2d<S> bn_down, bn1, bn2;
    bool use_sdfpr = false;
    SdfprBlock<S> sdfpr;

    BackboneStage() = default;
    template <typename Rng>
    BackboneStage(std::int64_t cin, std::int64_t cout, bool with_sdfpr, const SdfprConfig& scfg,
                  Rng& rng)
        : down(cin, cout, 3, rng, 2, 1), c1(cout, cout, 3, rng, 1, 1), c2(cout, cout, 3, rng, 1, 1),
          bn_down(cout), bn1(cout), bn2(cout), use_sdfpr(with_sdfpr) {
        if (with_sdfpr) sdfpr = SdfprBlock<S>(cout, scfg, rng);
    }

    Tensor<S> forward(const Tensor<S>& x, const TrainContext& ctx) {
        auto y = relu(bn_down.forward(down.forward(x), ctx.training));
        auto h = relu(bn1.forward(c1.forward(y), ctx.training));
        if (use_sdfpr) {
            const std::int64_t N = h.dim(0), C = h.dim(1), H = h.dim(2), W = h.dim(3);
            auto tokens = permute(reshape(h, {N, C, H * W}), {0, 2, 1});
            tokens = sdfpr.forward(tokens, H, W, ctx);
            h = reshape(permute(tokens, {0, 2, 1}), {N, C, H, W});
        }
        return relu(add(y, bn2.forward(c2.forward(h), ctx.training)));
    }

    void params(ParamList<S>& out, const std::string& p) const {
        down.params(out, p + ".down");
        c1.params(out, p + ".c1");
        c2.params(out, p + ".c2");
        bn_down.params(out, p + ".bn_down");
        bn1.params(out, p + ".bn1");
        bn2.params(out, p + ".bn2");
        if (use_sdfpr) sdfpr.params(out, p + ".sdfpr");
    }
    void buffers(BufferList<S>& out, const std::string& p) {
        bn_down.buffers(out, p + ".bn_down");
        bn1.buffers(out, p + ".bn1");
        bn2.buffers(out, p + ".bn2");
    }
};

template <typename S>
struct Detector {
    // architecture knobs captured from config
    std::int64_t d_model = 64, heads = 4, enc_layers = 6, dec_layers = 6, num_queries = 300;
    std::int64_t num_classes = 2;
    double temperature = 20.0;
    InteractionStrategy strategy = InteractionStrategy::Dfi;
    bool msffm_enabled = true;

    Conv2d<S> stem1, stem2;
    BatchNorm2d<S> bn_stem1, bn_stem2;
    std::vector<BackboneStage<S>> stages;
    std::vector<Conv2d<S>> align;
    Msffm<S> msffm;
    Tensor<S> level_embed;  // (3, d_model)
    Encoder<S> encoder;
    DfiAggregator<S> dfi;
    Decoder<S> decoder;
    DetectionHead<S> head;

    Detector() = default;

    template <typename Rng>
    Detector(const Json& cfg, Rng& rng) {
        const auto& tc = cfg.at("transformer");
        d_model = tc.at("d_model").get<std::int64_t>();
        heads = tc.at("heads").get<std::int64_t>();
        enc_layers = tc.at("encoder_layers").get<std::int64_t>();
        dec_layers = tc.at("decoder_layers").get<std::int64_t>();
        num_queries = tc.at("num_queries").get<std::int64_t>();
        temperature = tc.at("temperature").get<double>();
        strategy = strategy_from_name(tc.at("interaction").get<std::string>());
        num_classes = cfg.at("classes").get<std::int64_t>();
        const auto ffn_dim =
            static_cast<std::int64_t>(d_model * tc.at("ffn_ratio").get<double>());

        const auto& bc = cfg.at("backbone");
        const auto stem_w = bc.at("stem_width").get<std::int64_t>();
        const auto widths = bc.at("widths").get<std::vector<std::int64_t>>();
        if (widths.size() != 3) fail_shape("Detector: backbone.widths must list 3 stages");

        const auto& sc = cfg.at("sdfpr");
        SdfprConfig scfg;
        scfg.kernel_points = sc.at("kernel_points").get<std::int64_t>();
        scfg.s_max = sc.at("s_max").get<double>();
        scfg.groups = sc.at("groups").get<std::int64_t>();
        scfg.droppath_keep = sc.at("droppath_keep").get<double>();
        scfg.ffn_ratio = sc.at("ffn_ratio").get<double>();
        scfg.resample_each_forward = sc.at("resample_each_forward").get<bool>();
        scfg.bounds.w_lo = sc.at("w_clip")[0].get<double>();
        scfg.bounds.w_hi = sc.at("w_clip")[1].get<double>();
        scfg.bounds.r_lo = sc.at("r_clip")[0].get<double>();
        scfg.bounds.r_hi = sc.at("r_clip")[1].get<double>();
        const bool use_sdfpr = sc.at("enabled").get<bool>();

        stem1 = Conv2d<S>(1, stem_w, 3, rng, 2, 1);
        stem2 = Conv2d<S>(stem_w, stem_w, 3, rng, 2, 1);
        bn_stem1 = BatchNorm2d<S>(stem_w);
        bn_stem2 = BatchNorm2d<S>(stem_w);
        std::int64_t cin = stem_w;
        for (int i = 0; i < 3; ++i) {
            stages.emplace_back(cin, widths[i], use_sdfpr, scfg, rng);
            cin = widths[i];
        }
        for (int i = 0; i < 3; ++i) align.emplace_back(widths[i], d_model, 1, rng);

        const auto& mc = cfg.at("msffm");
        msffm_enabled = mc.at("enabled").get<bool>();
        if (msffm_enabled) {
            PaConvConfig pcfg;
            pcfg.perception_kernel = mc.at("perception_kernel").get<std::int64_t>();
            pcfg.aggregate_kernel = mc.at("aggregate_kernel").get<std::int64_t>();
            pcfg.groups = mc.at("groups").get<std::int64_t>();
            pcfg.embed_ratio = mc.at("embed_ratio").get<double>();
            msffm = Msffm<S>(d_model, pcfg, rng);
        }

        level_embed = Tensor<S>::randn({3, d_model}, rng, static_cast<S>(0.02), true);
        encoder = Encoder<S>(enc_layers, d_model, heads, ffn_dim, rng);
        dfi = DfiAggregator<S>(enc_layers, d_model, tc.at("dfi_iterative").get<bool>());
        decoder = Decoder<S>(dec_layers, num_queries, d_model, heads, ffn_dim, rng);
        head = DetectionHead<S>(d_model, num_classes, rng);
    }

    void set_prior(std::shared_ptr<const GmmPrior2D> prior) {
        for (auto& st : stages)
            if (st.use_sdfpr) st.sdfpr.prior = prior;
    }

    // Channel-aligned pyramid before MSFFM, strides 8/16/32.
    FeaturePyramid<S> pyramid_features(const Tensor<S>& images, const TrainContext& ctx) {
        if (images.rank() != 4 || images.dim(1) != 1)
            fail_shape("Detector: images must be (B, 1, H, W), got " + dims_str(images.shape()));
        auto x = relu(bn_stem1.forward(stem1.forward(images), ctx.training));
        x = relu(bn_stem2.forward(stem2.forward(x), ctx.training));
        FeaturePyramid<S> pyr;
        for (int i = 0; i < 3; ++i) {
            x = stages[i].forward(x, ctx);
            pyr.levels.push_back(align[i].forward(x));
        }
        pyr.validate();
        return pyr;
    }

    // Returns per-decoder-layer outputs; the last entry is the final one.
    std::vector<DetectionOutput<S>> forward(const Tensor<S>& images, const TrainContext& ctx) {
        const std::int64_t B = images.dim(0);
        auto pyr = pyramid_features(images, ctx);
        if (msffm_enabled) pyr = msffm.forward(pyr, ctx.training);

        std::vector<Tensor<S>> token_levels;
        for (int i = 0; i < 3; ++i) {
            const auto& f = pyr.levels[i];
            const std::int64_t Hi = f.dim(2), Wi = f.dim(3);
            auto t = permute(reshape(f, {B, d_model, Hi * Wi}), {0, 2, 1});
            auto pos = reshape(positional_encoding<S>(Hi, Wi, d_model, temperature),
                               {1, Hi * Wi, d_model});
            auto lvl = reshape(slice(level_embed, 0, i, 1), {1, 1, d_model});
            token_levels.push_back(add(add(t, pos), lvl));
        }
        auto tokens = concat(token_levels, 1);

        auto enc_outs = encoder.forward(tokens);
        std::vector<Tensor<S>> maps;
        if (strategy == InteractionStrategy::Dfi) maps = dfi.aggregate(enc_outs);
        auto queries = decoder.forward(strategy, enc_outs, maps, B);

        std::vector<DetectionOutput<S>> outs;
        outs.reserve(queries.size());
        for (const auto& q : queries) outs.push_back(head.forward(q));
        return outs;
    }

    void params(ParamList<S>& out) const {
        stem1.params(out, "stem1");
        stem2.params(out, "stem2");
        bn_stem1.params(out, "bn_stem1");
        bn_stem2.params(out, "bn_stem2");
        for (std::size_t i = 0; i < stages.size(); ++i)
            stages[i].params(out, "stage" + std::to_string(i));
        for (std::size_t i = 0; i < align.size(); ++i)
            align[i].params(out, "align" + std::to_string(i));
        if (msffm_enabled) msffm.params(out, "msffm");
        add_param(out, "level_embed", level_embed);
        encoder.params(out, "encoder");
        dfi.params(out, "dfi");
        decoder.params(out, "decoder");
        head.params(out, "head");
    }
    void buffers(BufferList<S>& out) {
        bn_stem1.buffers(out, "bn_stem1");
        bn_stem2.buffers(out, "bn_stem2");
        for (std::size_t i = 0; i < stages.size(); ++i)
            stages[i].buffers(out, "stage" + std::to_string(i));
        if (msffm_enabled) msffm.buffers(out, "msffm");
    }
};

// ---------------------------------------------------------------------------
// Inference helpers
// ---------------------------------------------------------------------------

// Every (query, class) pair is a candidate; keep the top_k best per image.
template <typename S>
std::vector<EvalDetection> extract_detections(const DetectionOutput<S>& out,
                                              const std::vector<int>& image_ids, int top_k = 100) {
    const std::int64_t B = out.class_logits.dim(0), Q = out.class_logits.dim(1),
                       K = out.class_logits.dim(2);
    const auto lv = out.class_logits.values();
    const auto bv = out.boxes.values();
    std::vector<EvalDetection> dets;
    for (std::int64_t b = 0; b < B; ++b) {
        std::vector<EvalDetection> local;
        for (std::int64_t q = 0; q < Q; ++q)
            for (std::int64_t k = 0; k < K; ++k) {
                EvalDetection d;
                d.image_id = image_ids[b];
                d.label = static_cast<int>(k);
                const double logit = static_cast<double>(lv[(b * Q + q) * K + k]);
                d.score = 1.0 / (1.0 + std::exp(-logit));
                d.box = BoxCxcywh{static_cast<double>(bv[(b * Q + q) * 4 + 0]),
                                  static_cast<double>(bv[(b * Q + q) * 4 + 1]),
                                  static_cast<double>(bv[(b * Q + q) * 4 + 2]),
                                  static_cast<double>(bv[(b * Q + q) * 4 + 3])};
                local.push_back(d);
            }
        std::sort(local.begin(), local.end(),
                  [](const EvalDetection& a, const EvalDetection& b) { return a.score > b.score; });
        if (static_cast<int>(local.size()) > top_k) local.resize(top_k);
        dets.insert(dets.end(), local.begin(), local.end());
    }
    return dets;
}

template <typename S>
Tensor<S> stack_images(const std::vector<Sample>& samples, const std::vector<int>& idx) {
    const std::int64_t B = static_cast<std::int64_t>(idx.size());
    const std::int64_t H = samples[idx[0]].image.dim(0), W = samples[idx[0]].image.dim(1);
    std::vector<S> vals(static_cast<std::size_t>(B * H * W));
    for (std::int64_t b = 0; b < B; ++b) {
        const auto iv = samples[idx[b]].image.values();
        for (std::int64_t i = 0; i < H * W; ++i) vals[b * H * W + i] = static_cast<S>(iv[i]);
    }
    return Tensor<S>::from({B, 1, H, W}, std::move(vals));
}

inline std::vector<EvalGroundTruth> to_eval_gts(const std::vector<Sample>& samples) {
    std::vector<EvalGroundTruth> gts;
    for (const auto& s : samples) {
        const double H = static_cast<double>(s.image.dim(0)), W = static_cast<double>(s.image.dim(1));
        for (std::size_t i = 0; i < s.boxes.size(); ++i) {
            EvalGroundTruth g;
            g.image_id = s.id;
            g.label = s.labels[i];
            g.box = s.boxes[i];
            g.pixel_area = s.boxes[i].w * W * s.boxes[i].h * H;
            gts.push_back(g);
        }
    }
    return gts;
}

template <typename S>
EvalReport evaluate_model(Detector<S>& model, const std::vector<Sample>& samples, int num_classes,
                          int batch_size = 8, int top_k = 50) {
    NoGradGuard ng;
    TrainContext ctx;  // eval mode
    std::vector<EvalDetection> dets;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        std::vector<int> idx, ids;
        for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) {
            idx.push_back(static_cast<int>(i));
            ids.push_back(samples[i].id);
        }
        auto outs = model.forward(stack_images<S>(samples, idx), ctx);
        auto batch_dets = extract_detections(outs.back(), ids, top_k);
        dets.insert(dets.end(), batch_dets.begin(), batch_dets.end());
    }
    return evaluate(dets, to_eval_gts(samples), num_classes);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochStats {
    int epoch = 0;
    double loss = 0, cls = 0, l1 = 0, giou = 0;
    std::optional<double> ap50;
};

template <typename S>
std::vector<EpochStats> train_detector(Detector<S>& model, const std::vector<Sample>& train_set,
                                       const std::vector<Sample>& val_set, const Json& cfg,
                                       std::ostream* log = nullptr) {
    const auto& tc = cfg.at("train");
    const int epochs = tc.at("epochs").get<int>();
    const int batch_size = tc.at("batch_size").get<int>();
    const double grad_clip = tc.at("grad_clip").get<double>();
    const int eval_every = tc.at("eval_every").get<int>();
    const auto& lc = cfg.at("loss");
    MatchWeights mw;
    mw.lambda_cls = lc.at("lambda_cls").get<double>();
    mw.lambda_l1 = lc.at("lambda_l1").get<double>();
    mw.lambda_giou = lc.at("lambda_giou").get<double>();
    mw.focal_alpha = lc.at("focal_alpha").get<double>();
    mw.focal_gamma = lc.at("focal_gamma").get<double>();
    const bool aux = lc.at("aux_losses").get<bool>();
    const int num_classes = cfg.at("classes").get<int>();

    ParamList<S> params;
    model.params(params);
    AdamW<S> opt(params, tc.at("lr").get<double>(), tc.at("weight_decay").get<double>());

    std::mt19937_64 rng(cfg.at("seed").get<std::uint64_t>() ^ 0x7261696eULL);
    TrainContext ctx{true, &rng};

    std::vector<int> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    const int lr_drop = tc.at("lr_drop_epoch").get<int>();

    std::vector<EpochStats> history;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        if (lr_drop > 0 && epoch == lr_drop) opt.set_lr(opt.lr() * 0.1);
        std::shuffle(order.begin(), order.end(), rng);
        EpochStats st;
        st.epoch = epoch;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += batch_size) {
            std::vector<int> idx(order.begin() + start,
                                 order.begin() + std::min(order.size(), start + batch_size));
            auto images = stack_images<S>(train_set, idx);
            std::vector<GtImage> gts;
            for (int i : idx) {
                GtImage g;
                for (std::size_t k = 0; k < train_set[i].boxes.size(); ++k)
                    g.push_back({train_set[i].boxes[k], train_set[i].labels[k]});
                gts.push_back(std::move(g));
            }
            auto batch_diag = [&](const std::string& what) {
                std::ostringstream os;
                os << what << " at epoch " << epoch << ", batch with samples [";
                for (int i : idx) os << train_set[i].id << " ";
                os << "]";
                return os.str();
            };
            Tensor<S> loss;
            LossBreakdown bd;
            try {
                auto outs = model.forward(images, ctx);
                std::vector<DetectionOutput<S>> supervised;
                if (aux)
                    supervised = outs;
                else
                    supervised = {outs.back()};
                std::tie(loss, bd) = detection_loss(supervised, gts, mw);
            } catch (const NumericError& e) {
                throw NumericError(batch_diag(e.what()));
            }
            if (!std::isfinite(bd.total)) {
                std::ostringstream os;
                os << "non-finite loss " << bd.total << " (cls=" << bd.cls << " l1=" << bd.l1
                   << " giou=" << bd.giou << ")";
                throw NumericError(batch_diag(os.str()));
            }
            opt.zero_grad();
            backward(loss);
            if (grad_clip > 0) opt.clip_grad_norm(grad_clip);
            opt.step();
            st.loss += bd.total;
            st.cls += bd.cls;
            st.l1 += bd.l1;
            st.giou += bd.giou;
            ++batches;
        }
        st.loss /= batches;
        st.cls /= batches;
        st.l1 /= batches;
        st.giou /= batches;
        if (!val_set.empty() && eval_every > 0 &&
            (epoch % eval_every == eval_every - 1 || epoch + 1 == epochs)) {
            auto rep = evaluate_model(model, val_set, num_classes);
            st.ap50 = rep.ap50;
        }
        if (log) {
            Json j{{"epoch", st.epoch}, {"loss", st.loss},   {"cls", st.cls},
                   {"l1", st.l1},       {"giou", st.giou}};
            j["ap50"] = st.ap50 ? Json(*st.ap50) : Json(nullptr);
            (*log) << j.dump() << "\n" << std::flush;
        }
        history.push_back(st);
    }
    return history;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, config JSON, then named TNSR blocks for every
// parameter and buffer.
// ---------------------------------------------------------------------------

template <typename S>
void save_checkpoint(const std::string& path, Detector<S>& model, const Json& cfg) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    ParamList<S> items;
    model.params(items);
    BufferList<S> bufs;
    model.buffers(bufs);
    for (auto& [name, vec] : bufs)
        items.push_back({name, Tensor<S>::from({static_cast<std::int64_t>(vec->size())},
                                               std::vector<S>(vec->begin(), vec->end()))});
    const std::string cfg_text = cfg.dump();
    os.write("PDCK", 4);
    detail::put_u64(os, cfg_text.size());
    os.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
    detail::put_u64(os, items.size());
    for (const auto& it : items) {
        detail::put_u64(os, it.name.size());
        os.write(it.name.data(), static_cast<std::streamsize>(it.name.size()));
        write_tensor(os, it.tensor);
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline Json checkpoint_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "PDCK", 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const auto len = detail::get_u64(is);
    std::string cfg_text(len, '\0');
    is.read(cfg_text.data(), static_cast<std::streamsize>(len));
    return Json::parse(cfg_text);
}

template <typename S>
void load_checkpoint(const std::string& path, Detector<S>& model) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "PDCK", 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const auto len = detail::get_u64(is);
    is.seekg(static_cast<std::streamoff>(len), std::ios::cur);
    const auto count = detail::get_u64(is);
    std::unordered_map<std::string, Tensor<double>> loaded;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto nlen = detail::get_u64(is);
        std::string name(nlen, '\0');
        is.read(name.data(), static_cast<std::streamsize>(nlen));
        loaded.emplace(std::move(name), read_tensor<double>(is));
    }
    ParamList<S> items;
    model.params(items);
    for (auto& it : items) {
        auto found = loaded.find(it.name);
        if (found == loaded.end())
            throw std::runtime_error("checkpoint: missing parameter " + it.name);
        if (found->second.shape() != it.tensor.shape())
            throw std::runtime_error("checkpoint: shape mismatch for " + it.name);
        auto dst = it.tensor.values();
        const auto src = found->second.values();
        for (std::int64_t k = 0; k < it.tensor.numel(); ++k) dst[k] = static_cast<S>(src[k]);
    }
    BufferList<S> bufs;
    model.buffers(bufs);
    for (auto& [name, vec] : bufs) {
        auto found = loaded.find(name);
        if (found == loaded.end()) throw std::runtime_error("checkpoint: missing buffer " + name);
        if (found->second.numel() != static_cast<std::int64_t>(vec->size()))
            throw std::runtime_error("checkpoint: size mismatch for " + name);
        const auto src = found->second.values();
        for (std::size_t k = 0; k < vec->size(); ++k) (*vec)[k] = static_cast<S>(src[k]);
    }
}

}  // namespace priordet
