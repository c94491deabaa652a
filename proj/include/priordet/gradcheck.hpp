// The finite-difference verification suite behind `check-grads` and the
// gradient acceptance gate. Every differentiable op and every composite
// block gets a named check at 64-bit precision. Losses are weighted sums so
// each output coordinate carries a distinct cotangent.

#pragma once

#include <chrono>

#include "priordet/detection.hpp"
#include "priordet/finite_diff.hpp"
#include "priordet/model.hpp"

namespace priordet {

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0;
    double tolerance = 0;
    bool passed() const { return max_rel_err < tolerance; }
};

namespace detail {

template <typename F>
GradCheckResult timed_check(const std::string& name, double tol, F&& fn) {
    GradCheckResult r{name, fn(), tol};
    return r;
}

}  // namespace detail

inline std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed = 20240915) {
    using T = Tensor<double>;
    std::mt19937_64 rng(seed);
    std::vector<GradCheckResult> results;
    const double eps = 1e-5;

    auto weighted = [&](const T& w, const T& y) { return sum(mul(w, y)); };
    auto rand_t = [&](Dims d, double lo = -1.5, double hi = 1.5) {
        return T::uniform(std::move(d), rng, lo, hi);
    };
    // Inputs bounded away from the kinks of relu/abs/max-style ops.
    auto rand_nz = [&](Dims d) {
        auto t = rand_t(std::move(d));
        for (auto& v : t.values())
            if (std::abs(v) < 0.05) v = v < 0 ? v - 0.1 : v + 0.1;
        return t;
    };

    auto check1 = [&](const std::string& name, double tol, Dims shape,
                      std::function<T(const T&)> f, bool away_from_kinks = false) {
        auto x = away_from_kinks ? rand_nz(shape) : rand_t(shape);
        results.push_back(detail::timed_check(name, tol, [&]() {
            return finite_diff_check<double>(f, x, eps).max_rel_err;
        }));
    };

    // --- elementwise / core ---
    {
        auto w = rand_t({3, 4});
        check1("add_broadcast", 1e-5, {3, 4}, [&](const T& x) {
            return weighted(w, add(x, rand_t({4})));
        });
    }
    {
        auto b = rand_t({2, 1, 5});
        auto w = rand_t({2, 3, 5});
        check1("mul_broadcast", 1e-5, {3, 5}, [&](const T& x) { return weighted(w, mul(b, x)); });
    }
    {
        auto b = T::uniform({3, 4}, rng, 0.5, 2.0);
        auto w = rand_t({3, 4});
        check1("div", 1e-5, {3, 4}, [&](const T& x) { return weighted(w, div(x, b)); });
    }
    {
        auto w = rand_t({3, 4});
        check1("sub", 1e-5, {3, 4}, [&](const T& x) { return weighted(w, sub(rand_t({3, 4}), x)); });
    }
    {
        auto b = rand_t({4, 5});
        auto w = rand_t({3, 5});
        check1("matmul_2d", 1e-5, {3, 4}, [&](const T& x) { return weighted(w, matmul(x, b)); });
    }
    {
        auto b = rand_t({2, 4, 3});
        auto w = rand_t({2, 5, 3});
        check1("matmul_batched", 1e-5, {2, 5, 4},
               [&](const T& x) { return weighted(w, matmul(x, b)); });
    }
    {
        auto wt = rand_t({6, 4});
        auto bias = rand_t({6});
        auto w = rand_t({2, 3, 6});
        check1("linear", 1e-5, {2, 3, 4},
               [&](const T& x) { return weighted(w, linear(x, wt, bias)); });
    }
    check1("relu", 1e-5, {4, 5}, [&](const T& x) { return sum(relu(x)); }, true);
    check1("sigmoid", 1e-5, {4, 5}, [&](const T& x) { return sum(sigmoid(x)); });
    check1("log_sigmoid", 1e-5, {4, 5}, [&](const T& x) { return sum(log_sigmoid(x)); });
    check1("exp", 1e-5, {4, 5}, [&](const T& x) { return sum(exp(x)); });
    {
        check1("log", 1e-5, {4, 5}, [&](const T& x) { return sum(log(add_scalar(mul(x, x), 0.5))); });
    }
    check1("sqrt", 1e-5, {4, 5},
           [&](const T& x) { return sum(sqrt(add_scalar(mul(x, x), 0.3))); });
    check1("abs", 1e-5, {4, 5}, [&](const T& x) { return sum(abs(x)); }, true);
    check1("pow_scalar", 1e-5, {4, 5},
           [&](const T& x) { return sum(pow_scalar(add_scalar(mul(x, x), 0.2), 2.5)); });
    {
        auto w = rand_t({3, 6});
        check1("softmax", 1e-5, {3, 6}, [&](const T& x) { return weighted(w, softmax(x, 1)); });
    }
    {
        auto bound = T::uniform({1, 4, 1, 2}, rng, 0.8, 1.2);
        auto w = rand_t({2, 4, 3, 2});
        check1("clamp_sym", 1e-5, {2, 4, 3, 2},
               [&](const T& x) { return weighted(w, clamp_sym(x, bound)); }, true);
    }
    {
        auto b = rand_t({4, 5});
        auto w = rand_t({4, 5});
        check1("maximum", 1e-5, {4, 5}, [&](const T& x) { return weighted(w, maximum(x, b)); });
        check1("minimum", 1e-5, {4, 5}, [&](const T& x) { return weighted(w, minimum(x, b)); });
    }
    {
        auto w = rand_t({2, 3});
        check1("reductions", 1e-5, {2, 3, 4}, [&](const T& x) {
            return weighted(w, add(sum_axis(x, 2), mul_scalar(mean_axis(x, -1), 0.7)));
        });
    }
    {
        auto w = rand_t({2, 2, 3, 2});
        check1("shape_ops", 1e-5, {2, 3, 4}, [&](const T& x) {
            auto p = permute(x, {2, 0, 1});                       // (4,2,3)
            auto r = reshape(slice(p, 0, 1, 2), {2, 2, 3});       // (2,2,3)
            auto c = concat<double>({r, mul_scalar(r, 0.5)}, 2);  // (2,2,6)
            return weighted(w, reshape(c, {2, 2, 3, 2}));
        });
    }
    {
        auto w = rand_t({3, 4});
        check1("gather_rows", 1e-5, {5, 4}, [&](const T& x) {
            return weighted(w, gather_rows(x, {4, 0, 4}));
        });
    }

    // --- structured ops ---
    {
        auto k = rand_t({4, 2, 3, 3});
        auto bias = rand_t({4});
        auto w = rand_t({2, 4, 3, 3});
        check1("conv2d", 1e-5, {2, 4, 5, 5}, [&](const T& x) {
            return weighted(w, conv2d(x, k, 2, 1, 2, bias));
        });
    }
    {
        auto x = rand_t({2, 4, 5, 5});
        auto k = rand_t({4, 2, 3, 3});
        auto w = rand_t({2, 4, 5, 5});
        results.push_back(detail::timed_check("conv2d_kernel", 1e-5, [&]() {
            return finite_diff_check<double>(
                [&](const T& kk) { return weighted(w, conv2d(x, kk, 1, 1, 2)); }, k, eps)
                .max_rel_err;
        }));
    }
    {
        auto gamma = rand_t({5}, 0.5, 1.5);
        auto beta = rand_t({5});
        auto w = rand_t({3, 5});
        check1("layer_norm", 1e-5, {3, 5},
               [&](const T& x) { return weighted(w, layer_norm(x, gamma, beta)); });
    }
    {
        auto gamma = rand_t({3}, 0.5, 1.5);
        auto beta = rand_t({3});
        std::vector<double> rm(3, 0.1), rv(3, 0.9);
        auto w = rand_t({2, 3, 4, 4});
        check1("batch_norm_train", 1e-5, {2, 3, 4, 4}, [&](const T& x) {
            std::vector<double> rm2 = rm, rv2 = rv;
            return weighted(w, batch_norm(x, gamma, beta, rm2, rv2, true));
        });
        check1("batch_norm_eval", 1e-5, {2, 3, 4, 4}, [&](const T& x) {
            std::vector<double> rm2 = rm, rv2 = rv;
            return weighted(w, batch_norm(x, gamma, beta, rm2, rv2, false));
        });
    }
    {
        auto feat = rand_t({2, 3, 6, 6});
        auto loc = T::uniform({2, 7, 2}, rng, -0.7, 6.3);
        auto w = rand_t({2, 3, 7});
        results.push_back(detail::timed_check("bilinear_sample_feat", 1e-5, [&]() {
            return finite_diff_check<double>(
                [&](const T& f) { return weighted(w, bilinear_sample(f, loc)); }, feat, eps)
                .max_rel_err;
        }));
        results.push_back(detail::timed_check("bilinear_sample_loc", 1e-5, [&]() {
            return finite_diff_check<double>(
                [&](const T& l) { return weighted(w, bilinear_sample(feat, l)); }, loc, eps)
                .max_rel_err;
        }));
    }
    {
        auto kmap = rand_t({1, 2 * 9, 4, 4});
        auto w = rand_t({1, 4, 4, 4});
        check1("dynamic_group_conv_x", 1e-5, {1, 4, 4, 4}, [&](const T& x) {
            return weighted(w, dynamic_group_conv(x, kmap, 2, 3));
        });
        auto x = rand_t({1, 4, 4, 4});
        results.push_back(detail::timed_check("dynamic_group_conv_w", 1e-5, [&]() {
            return finite_diff_check<double>(
                [&](const T& k) { return weighted(w, dynamic_group_conv(x, k, 2, 3)); }, kmap, eps)
                .max_rel_err;
        }));
    }

    // --- spectral path ---
    {
        auto w = rand_t({1, 2, 4, 6});
        check1("fft2_ifft2", 1e-5, {1, 2, 4, 6}, [&](const T& x) {
            auto sp = fft2(x);
            auto back = ifft2(sp);
            return weighted(w, add(back.re, mul_scalar(back.im, 0.3)));
        });
        check1("fft_amplitude", 1e-5, {1, 2, 4, 4}, [&](const T& x) {
            return sum(amplitude(fft2(x)));
        });
    }
    {
        std::mt19937_64 r2(seed + 1);
        FrequencyBranch<double> fb(3, r2);
        // Perturb away from the exact pass-through so the check exercises a
        // generic filter.
        for (auto& v : fb.pw.weight.values()) v += 0.05 * (v + 0.3);
        auto w = rand_t({1, 3, 4, 4});
        check1("frequency_branch", 1e-4, {1, 3, 4, 4},
               [&](const T& x) { return weighted(w, fb.forward(x, false)); });
    }
    {
        std::mt19937_64 r2(seed + 2);
        PaConvConfig pc;
        pc.perception_kernel = 5;
        pc.aggregate_kernel = 3;
        pc.groups = 2;
        SpatialBranch<double> sb(4, pc, r2);
        auto w = rand_t({1, 4, 5, 5});
        check1("spatial_branch", 1e-4, {1, 4, 5, 5},
               [&](const T& x) { return weighted(w, sb.forward(x)); });
    }
    {
        std::mt19937_64 r2(seed + 3);
        PaConvConfig pc;
        pc.perception_kernel = 5;
        pc.aggregate_kernel = 3;
        pc.groups = 2;
        Dbffm<double> db(4, pc, r2);
        for (auto& v : db.frequency.pw.weight.values()) v += 0.03 * (v + 0.2);
        auto w = rand_t({1, 4, 4, 4});
        check1("dbffm", 1e-4, {1, 4, 4, 4},
               [&](const T& x) { return weighted(w, db.forward(x, false)); });
    }

    // --- sdfpr path ---
    {
        auto grid = kernel_grid<double>(9);
        auto scale = rand_t({1, 4, 2});
        auto w = rand_t({1, 4, 2, 9, 2});
        check1("compute_base_offsets", 1e-5, {1, 4, 2, 9, 2}, [&](const T& x) {
            return weighted(w, compute_base_offsets(x, scale, grid, 4.0));
        });
    }
    {
        std::vector<PriorFactors> fac{{0.9, 1.1}, {1.3, 0.7}};
        auto w = rand_t({1, 4, 2, 9, 2});
        check1("modulate_and_clamp", 1e-5, {1, 4, 2, 9, 2}, [&](const T& x) {
            return weighted(w, modulate_and_clamp(x, fac, 4.0).second);
        }, true);
    }
    {
        std::mt19937_64 r2(seed + 4);
        SdfprConfig sc;
        sc.groups = 2;
        sc.kernel_points = 9;
        sc.s_max = 2.0;
        sc.droppath_keep = 1.0;
        PriorDcn<double> dcn(4, sc, r2);
        // Randomize the zero-initialized heads so offsets move.
        for (auto& v : dcn.offset_head.weight.values()) v = 0.1 * (rand_t({1}).item());
        for (auto& v : dcn.scale_head.weight.values()) v = 0.1 * (rand_t({1}).item());
        std::vector<PriorFactors> fac{{1.1, 0.9}, {0.8, 1.2}};
        auto w = rand_t({1, 16, 4});
        check1("prior_dcn", 1e-4, {1, 16, 4}, [&](const T& x) {
            return weighted(w, dcn.forward(x, 4, 4, fac));
        });
    }
    {
        std::mt19937_64 r2(seed + 5);
        SdfprConfig sc;
        sc.groups = 2;
        sc.kernel_points = 9;
        sc.s_max = 2.0;
        sc.droppath_keep = 1.0;
        SdfprBlock<double> blk(4, sc, r2);
        for (auto& v : blk.dcn.offset_head.weight.values()) v = 0.1 * (rand_t({1}).item());
        blk.frozen_factors = {{1.1, 0.9}, {0.8, 1.2}};
        TrainContext ctx;  // eval: deterministic, no droppath
        auto w = rand_t({1, 16, 4});
        check1("sdfpr_block", 1e-4, {1, 16, 4}, [&](const T& x) {
            return weighted(w, blk.forward(x, 4, 4, ctx));
        });
    }

    // --- transformer path ---
    {
        std::mt19937_64 r2(seed + 6);
        MultiheadAttention<double> mha(8, 2, r2);
        auto kv = rand_t({1, 5, 8});
        auto w = rand_t({1, 3, 8});
        check1("attention", 1e-4, {1, 3, 8},
               [&](const T& x) { return weighted(w, mha.forward(x, kv, kv)); });
    }
    {
        std::mt19937_64 r2(seed + 7);
        EncoderLayer<double> enc(8, 2, 16, r2);
        auto w = rand_t({1, 5, 8});
        check1("encoder_layer", 1e-4, {1, 5, 8},
               [&](const T& x) { return weighted(w, enc.forward(x)); });
    }
    {
        std::mt19937_64 r2(seed + 8);
        DecoderLayer<double> dec(8, 2, 16, r2);
        auto kv = rand_t({1, 5, 8});
        auto w = rand_t({1, 3, 8});
        check1("decoder_layer", 1e-4, {1, 3, 8},
               [&](const T& x) { return weighted(w, dec.forward(x, kv)); });
    }
    {
        std::mt19937_64 r2(seed + 9);
        DfiAggregator<double> agg(3, 6);
        for (auto& g : agg.gamma)
            for (auto& v : g.weight.values()) v = 0.2 * rand_t({1}).item();
        for (auto& v : agg.psi.weight.values()) v += 0.1 * rand_t({1}).item();
        auto e2 = rand_t({1, 4, 6});
        auto e3 = rand_t({1, 4, 6});
        auto w = rand_t({1, 4, 6});
        check1("dfi_aggregate", 1e-4, {1, 4, 6}, [&](const T& x) {
            auto maps = agg.aggregate({x, e2, e3});
            return weighted(w, add(maps[0], mul_scalar(maps[2], 0.5)));
        });
    }

    // --- losses ---
    {
        std::vector<double> tv(12);
        for (auto& v : tv) v = rand_t({1}).item() > 0 ? 1.0 : 0.0;
        auto targets = T::from({4, 3}, std::move(tv));
        check1("focal_loss", 1e-6, {4, 3},
               [&](const T& x) { return focal_loss(x, targets, 0.25, 2.0); });
    }
    {
        auto mk_boxes = [&](int n) {
            std::vector<double> v;
            for (int i = 0; i < n; ++i) {
                v.push_back(0.3 + 0.4 * rand_t({1}).item() * 0.5 + 0.2);
                v.push_back(0.3 + 0.4 * rand_t({1}).item() * 0.5 + 0.2);
                v.push_back(0.15 + 0.1 * std::abs(rand_t({1}).item()));
                v.push_back(0.15 + 0.1 * std::abs(rand_t({1}).item()));
            }
            return T::from({n, 4}, std::move(v));
        };
        auto gtb = mk_boxes(5);
        check1("giou_loss", 1e-5, {5, 4}, [&](const T& x) {
            auto boxes = add(mul_scalar(sigmoid(x), 0.2), Tensor<double>::filled({1}, 0.2));
            return sum(add_scalar(neg(giou_pairwise(boxes, gtb)), 1.0));
        });
    }
    {
        // total detection loss w.r.t. raw head activations
        GtImage gt{{BoxCxcywh{0.4, 0.45, 0.2, 0.25}, 0}, {BoxCxcywh{0.7, 0.6, 0.15, 0.2}, 1}};
        auto logits0 = rand_t({1, 5, 2});
        results.push_back(detail::timed_check("detection_loss", 1e-5, [&]() {
            return finite_diff_check<double>(
                [&](const T& raw) {
                    DetectionOutput<double> out;
                    out.class_logits = logits0;
                    out.boxes = reshape(sigmoid(raw), {1, 5, 4});
                    return detection_loss<double>({out}, {gt}).first;
                },
                rand_t({1, 5, 4}), eps)
                .max_rel_err;
        }));
        results.push_back(detail::timed_check("detection_loss_logits", 1e-5, [&]() {
            auto boxes = sigmoid(rand_t({1, 5, 4}));
            return finite_diff_check<double>(
                [&](const T& lg) {
                    DetectionOutput<double> out;
                    out.class_logits = lg;
                    out.boxes = boxes;
                    return detection_loss<double>({out}, {gt}).first;
                },
                rand_t({1, 5, 2}), eps)
                .max_rel_err;
        }));
    }

    return results;
}

}  // namespace priordet
