#include <doctest.h>

#include "priordet/finite_diff.hpp"
#include "priordet/sdfpr.hpp"
#include "oracles.hpp"

using namespace priordet;
using T = Tensor<double>;

namespace {

// kept thin: the scalar reference lives in oracles.hpp

template <typename Rng>
void randomize_heads(PriorDcn<double>& dcn, Rng& rng, double scale = 0.2) {
    std::uniform_real_distribution<double> u(-scale, scale);
    for (auto& v : dcn.offset_head.weight.values()) v = u(rng);
    for (auto& v : dcn.offset_head.bias.values()) v = u(rng);
    for (auto& v : dcn.scale_head.weight.values()) v = u(rng);
    for (auto& v : dcn.point_logits.values()) v = u(rng);
}

}  // namespace

TEST_SUITE_BEGIN("sdfpr");

TEST_CASE("base offsets: zero prediction scales the grid by sigmoid(0)*s_max") {
    auto pred = T::zeros({1, 2, 1, 9, 2});
    auto scale = T::zeros({1, 2, 1});
    auto grid = kernel_grid<double>(9);
    auto base = compute_base_offsets(pred, scale, grid, 4.0);
    for (int l = 0; l < 2; ++l)
        for (int k = 0; k < 9; ++k)
            for (int d = 0; d < 2; ++d)
                CHECK(base.at(0, l, 0, k, d) == doctest::Approx(grid.at(k, d) * 2.0).epsilon(1e-15));
}

TEST_CASE("base offsets collapse to the center as scale logits go to -inf") {
    auto pred = T::zeros({1, 1, 1, 9, 2});
    auto scale = T::filled({1, 1, 1}, -120.0);
    auto base = compute_base_offsets(pred, scale, kernel_grid<double>(9), 4.0);
    for (std::int64_t i = 0; i < base.numel(); ++i) CHECK(std::abs(base.values()[i]) < 1e-40);
}

TEST_CASE("base offsets match a scalar reference on random inputs") {
    std::mt19937_64 rng(3);
    auto pred = T::uniform({2, 3, 2, 9, 2}, rng, -1, 1);
    auto scale = T::uniform({2, 3, 2}, rng, -2, 2);
    auto grid = kernel_grid<double>(9);
    const double s_max = 3.5;
    auto base = compute_base_offsets(pred, scale, grid, s_max);
    for (int n = 0; n < 2; ++n)
        for (int l = 0; l < 3; ++l)
            for (int g = 0; g < 2; ++g) {
                const double sig = 1.0 / (1.0 + std::exp(-scale.at(n, l, g)));
                for (int k = 0; k < 9; ++k)
                    for (int d = 0; d < 2; ++d) {
                        const double want = (pred.at(n, l, g, k, d) + grid.at(k, d)) * sig * s_max;
                        CHECK(base.at(n, l, g, k, d) == doctest::Approx(want).epsilon(1e-12));
                    }
            }
}

TEST_CASE("modulate_and_clamp hand cases") {
    SUBCASE("neutral prior inside the band is the identity") {
        std::mt19937_64 rng(5);
        auto base = T::uniform({1, 2, 1, 9, 2}, rng, -3.9, 3.9);
        auto [mod, fin] = modulate_and_clamp(base, {{1.0, 1.0}}, 4.0);
        for (std::int64_t i = 0; i < base.numel(); ++i) {
            CHECK(mod.values()[i] == base.values()[i]);
            CHECK(fin.values()[i] == base.values()[i]);
        }
    }
    SUBCASE("direct substitution without clipping") {
        auto base = T::from({1, 1, 1, 1, 2}, {3.0, 0.0});
        auto [mod, fin] = modulate_and_clamp(base, {{1.0, 0.5}}, 4.0);  // r~=1, w~=0.5
        CHECK(mod.at(0, 0, 0, 0, 0) == doctest::Approx(1.5).epsilon(1e-15));
        CHECK(fin.at(0, 0, 0, 0, 0) == doctest::Approx(1.5).epsilon(1e-15));  // max_x = 2.0
    }
    SUBCASE("clamp saturation on the y axis") {
        auto base = T::from({1, 1, 1, 1, 2}, {0.0, 10.0});
        auto [mod, fin] = modulate_and_clamp(base, {{0.8, 0.5}}, 4.0);  // r~=0.8, w~=0.5
        CHECK(mod.at(0, 0, 0, 0, 1) == doctest::Approx(4.0).epsilon(1e-15));
        CHECK(fin.at(0, 0, 0, 0, 1) == doctest::Approx(1.6).epsilon(1e-15));  // max_y
    }
    SUBCASE("non-finite factors rejected") {
        auto base = T::zeros({1, 1, 1, 1, 2});
        CHECK_THROWS_AS(modulate_and_clamp(base, {{-1.0, 1.0}}, 4.0), std::invalid_argument);
    }
}

TEST_CASE("clamp invariant over 1000 random prior/offset draws") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> uw(0.1, 2.0), ur(0.2, 5.0);
    int checked = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const double s_max = 0.5 + 4.0 * std::generate_canonical<double, 53>(rng);
        auto base = T::uniform({1, 2, 2, 4, 2}, rng, -20.0, 20.0);
        std::vector<PriorFactors> fac{{ur(rng), uw(rng)}, {ur(rng), uw(rng)}};
        auto fin = modulate_and_clamp(base, fac, s_max).second;
        for (int l = 0; l < 2; ++l)
            for (int g = 0; g < 2; ++g)
                for (int k = 0; k < 4; ++k) {
                    CHECK(std::abs(fin.at(0, l, g, k, 0)) <= fac[g].w_tilde * s_max + 1e-12);
                    CHECK(std::abs(fin.at(0, l, g, k, 1)) <=
                          fac[g].w_tilde * fac[g].r_tilde * s_max + 1e-12);
                    ++checked;
                }
    }
    CHECK(checked == 1000 * 16);
}

TEST_CASE("anisotropy: r~ < 1 shrinks the y extent of a symmetric field") {
    std::mt19937_64 rng(13);
    // (x <-> y)-symmetric raw field: both coordinates share the same draw
    std::vector<double> vals(2 * 2 * 9 * 2);
    for (std::size_t i = 0; i < vals.size(); i += 2) {
        const double v = std::uniform_real_distribution<double>(-6, 6)(rng);
        vals[i] = v;
        vals[i + 1] = v;
    }
    auto base = T::from({1, 2, 2, 9, 2}, std::move(vals));
    std::vector<PriorFactors> fac{{0.6, 1.0}, {0.85, 1.2}};
    auto fin = modulate_and_clamp(base, fac, 4.0).second;
    double max_x = 0, max_y = 0;
    for (std::int64_t i = 0; i < fin.numel(); i += 2) {
        max_x = std::max(max_x, std::abs(fin.values()[i]));
        max_y = std::max(max_y, std::abs(fin.values()[i + 1]));
    }
    CHECK(max_y <= max_x + 1e-12);
}

TEST_CASE("identity configuration: K=1 center point with identity projection") {
    std::mt19937_64 rng(17);
    SdfprConfig cfg;
    cfg.kernel_points = 1;
    cfg.groups = 2;
    cfg.s_max = 4.0;
    PriorDcn<double> dcn(4, cfg, rng);
    // W_o := identity
    std::fill(dcn.out_proj.weight.values().begin(), dcn.out_proj.weight.values().end(), 0.0);
    for (int i = 0; i < 4; ++i) dcn.out_proj.weight.values()[i * 4 + i] = 1.0;
    std::fill(dcn.out_proj.bias.values().begin(), dcn.out_proj.bias.values().end(), 0.0);
    auto x = T::uniform({2, 12, 4}, rng, -1, 1);
    auto y = dcn.forward(x, 3, 4, {{1.0, 1.0}, {1.0, 1.0}});
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("zero offset heads + uniform weights average the scaled grid neighborhood") {
    std::mt19937_64 rng(19);
    SdfprConfig cfg;
    cfg.kernel_points = 9;
    cfg.groups = 1;
    cfg.s_max = 2.0;
    PriorDcn<double> dcn(2, cfg, rng);
    std::fill(dcn.out_proj.weight.values().begin(), dcn.out_proj.weight.values().end(), 0.0);
    for (int i = 0; i < 2; ++i) dcn.out_proj.weight.values()[i * 2 + i] = 1.0;
    std::fill(dcn.out_proj.bias.values().begin(), dcn.out_proj.bias.values().end(), 0.0);
    auto x = T::uniform({1, 25, 2}, rng, -1, 1);
    auto y = dcn.forward(x, 5, 5, {{1.0, 1.0}});
    // center position (2,2): sampling points on the grid scaled by sigmoid(0)*s_max = 1
    const std::int64_t l = 2 * 5 + 2;
    for (int c = 0; c < 2; ++c) {
        double want = 0;
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) want += x.at(0, (2 + dy) * 5 + (2 + dx), c) / 9.0;
        CHECK(y.at(0, l, c) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("vectorized forward equals the scalar brute-force implementation") {
    std::mt19937_64 rng(23);
    SdfprConfig cfg;
    cfg.kernel_points = 9;
    cfg.groups = 2;
    cfg.s_max = 3.0;
    PriorDcn<double> dcn(4, cfg, rng);
    randomize_heads(dcn, rng);
    auto x = T::uniform({1, 25, 4}, rng, -1, 1);
    std::vector<PriorFactors> fac{{1.3, 0.8}, {0.7, 1.4}};
    auto y = dcn.forward(x, 5, 5, fac);
    auto ref = oracles::prior_dcn_reference(dcn, x, 5, 5, fac);
    double err = 0;
    for (std::int64_t i = 0; i < y.numel(); ++i)
        err = std::max(err, std::abs(y.values()[i] - ref[i]));
    CHECK(err < 1e-10);
}

TEST_CASE("prior neutrality: neutral factors match modulation disabled bitwise") {
    std::mt19937_64 rng(29);
    SdfprConfig cfg;
    cfg.kernel_points = 9;
    cfg.groups = 2;
    cfg.s_max = 4.0;
    PriorDcn<double> dcn(4, cfg, rng);
    randomize_heads(dcn, rng, 0.05);  // keeps |base| well inside +-s_max
    auto x = T::uniform({1, 16, 4}, rng, -1, 1);
    std::vector<PriorFactors> neutral{{1.0, 1.0}, {1.0, 1.0}};
    auto with_mod = dcn.forward(x, 4, 4, neutral);
    dcn.modulation_enabled = false;
    auto without = dcn.forward(x, 4, 4, neutral);
    for (std::int64_t i = 0; i < with_mod.numel(); ++i)
        CHECK(with_mod.values()[i] == without.values()[i]);
}

TEST_CASE("sdfpr block: residual identity under zeroed sub-blocks") {
    std::mt19937_64 rng(31);
    SdfprConfig cfg;
    cfg.kernel_points = 9;
    cfg.groups = 2;
    cfg.droppath_keep = 1.0;
    SdfprBlock<double> blk(4, cfg, rng);
    auto zero = [](Tensor<double>& t) { std::fill(t.values().begin(), t.values().end(), 0.0); };
    zero(blk.dcn.out_proj.weight);
    zero(blk.dcn.out_proj.bias);
    zero(blk.ffn_out.weight);
    zero(blk.ffn_out.bias);
    auto x = T::uniform({2, 16, 4}, rng, -1, 1);
    TrainContext ctx;
    auto y = blk.forward(x, 4, 4, ctx);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("sdfpr block eval mode is deterministic") {
    std::mt19937_64 rng(37);
    SdfprConfig cfg;
    cfg.kernel_points = 9;
    cfg.groups = 2;
    cfg.droppath_keep = 0.5;  // would be stochastic in training
    SdfprBlock<double> blk(4, cfg, rng);
    randomize_heads(blk.dcn, rng);
    auto x = T::uniform({2, 16, 4}, rng, -1, 1);
    TrainContext ctx;  // eval
    auto a = blk.forward(x, 4, 4, ctx);
    auto b = blk.forward(x, 4, 4, ctx);
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.values()[i] == b.values()[i]);
}

TEST_CASE("sdfpr block gradient passes finite differences") {
    std::mt19937_64 rng(41);
    SdfprConfig cfg;
    cfg.kernel_points = 9;
    cfg.groups = 2;
    cfg.s_max = 2.0;
    cfg.droppath_keep = 1.0;
    SdfprBlock<double> blk(4, cfg, rng);
    randomize_heads(blk.dcn, rng);
    blk.frozen_factors = {{1.2, 0.9}, {0.7, 1.1}};
    TrainContext ctx;
    auto w = T::uniform({1, 9, 4}, rng, -1, 1);
    auto rep = finite_diff_check<double>(
        [&](const T& t) { return sum(mul(w, blk.forward(t, 3, 3, ctx))); },
        T::uniform({1, 9, 4}, rng, -1, 1), 1e-5);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("bilinear sample location gradient passes finite differences") {
    std::mt19937_64 rng(43);
    auto feat = T::uniform({1, 3, 6, 6}, rng, -1, 1);
    auto rep = finite_diff_check<double>(
        [&](const T& l) { return sum(bilinear_sample(feat, l)); },
        T::uniform({1, 8, 2}, rng, 0.3, 4.7), 1e-5);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("prior_dcn rejects mismatched sequence length") {
    std::mt19937_64 rng(47);
    SdfprConfig cfg;
    cfg.groups = 2;
    PriorDcn<double> dcn(4, cfg, rng);
    auto x = T::uniform({1, 10, 4}, rng, -1, 1);
    CHECK_THROWS_AS(dcn.forward(x, 3, 4, {{1, 1}, {1, 1}}), std::invalid_argument);
}

TEST_SUITE_END();
