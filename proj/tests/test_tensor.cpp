#include <doctest.h>

#include <random>
#include <sstream>

#include "priordet/fft.hpp"
#include "priordet/finite_diff.hpp"
#include "priordet/nn_ops.hpp"
#include "priordet/tensor_io.hpp"

using namespace priordet;
using T = Tensor<double>;

namespace {

// Direct 6-loop cross-correlation reference, independent of the im2col path.
std::vector<double> conv2d_naive(const T& x, const T& k, std::int64_t stride, std::int64_t pad,
                                 std::int64_t groups) {
    const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const auto O = k.dim(0), Cg = k.dim(1), kh = k.dim(2), kw = k.dim(3);
    const auto Ho = (H + 2 * pad - kh) / stride + 1;
    const auto Wo = (W + 2 * pad - kw) / stride + 1;
    const auto Og = O / groups;
    std::vector<double> out(static_cast<std::size_t>(N * O * Ho * Wo), 0.0);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t o = 0; o < O; ++o) {
            const auto g = o / Og;
            for (std::int64_t oh = 0; oh < Ho; ++oh)
                for (std::int64_t ow = 0; ow < Wo; ++ow) {
                    double acc = 0;
                    for (std::int64_t ci = 0; ci < Cg; ++ci)
                        for (std::int64_t i = 0; i < kh; ++i)
                            for (std::int64_t j = 0; j < kw; ++j) {
                                const auto ih = oh * stride + i - pad;
                                const auto iw = ow * stride + j - pad;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x.at(n, g * Cg + ci, ih, iw) * k.at(o, ci, i, j);
                            }
                    out[((n * O + o) * Ho + oh) * Wo + ow] = acc;
                }
        }
    return out;
}

}  // namespace

TEST_SUITE_BEGIN("tensor");

TEST_CASE("conv2d identity delta kernel") {
    std::mt19937_64 rng(1);
    auto x = T::uniform({1, 1, 3, 3}, rng, -1, 1);
    auto k = T::from({1, 1, 1, 1}, {1.0});
    auto y = conv2d(x, k);
    REQUIRE(y.shape() == x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("conv2d all-ones 2x2 gives 4") {
    auto x = T::filled({1, 1, 2, 2}, 1.0);
    auto k = T::filled({1, 1, 2, 2}, 1.0);
    auto y = conv2d(x, k);
    CHECK(y.numel() == 1);
    CHECK(y.item() == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("conv2d matches the 6-loop reference") {
    std::mt19937_64 rng(7);
    auto x = T::uniform({2, 4, 8, 8}, rng, -1, 1);
    auto k = T::uniform({3, 4, 3, 3}, rng, -1, 1);
    auto y = conv2d(x, k, 1, 1, 1);
    auto ref = conv2d_naive(x, k, 1, 1, 1);
    double err = 0;
    for (std::size_t i = 0; i < ref.size(); ++i)
        err = std::max(err, std::abs(ref[i] - y.values()[i]));
    CHECK(err < 1e-12);
}

TEST_CASE("conv2d oracle sweep over 100 random draws") {
    std::mt19937_64 rng(21);
    std::uniform_int_distribution<int> d_n(1, 2), d_g(1, 2), d_k(1, 3), d_s(1, 2), d_p(0, 2);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int g = d_g(rng);
        const int cg = d_g(rng), og = d_g(rng);
        const int C = g * cg, O = g * og;
        const int kh = d_k(rng), kw = d_k(rng);
        const int s = d_s(rng), p = d_p(rng);
        const int H = kh + d_p(rng) + 2, W = kw + d_p(rng) + 2;
        auto x = T::uniform({d_n(rng), C, H, W}, rng, -1, 1);
        auto k = T::uniform({O, cg, kh, kw}, rng, -1, 1);
        auto y = conv2d(x, k, s, p, g);
        auto ref = conv2d_naive(x, k, s, p, g);
        for (std::size_t i = 0; i < ref.size(); ++i)
            worst = std::max(worst, std::abs(ref[i] - y.values()[i]));
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("conv2d rejects bad shapes with the offending dimension named") {
    std::mt19937_64 rng(3);
    auto x = T::uniform({1, 3, 4, 4}, rng, -1, 1);
    auto k = T::uniform({2, 2, 3, 3}, rng, -1, 1);
    CHECK_THROWS_WITH_AS(conv2d(x, k), doctest::Contains("in-channel"), std::invalid_argument);
    auto k2 = T::uniform({2, 3, 3, 3}, rng, -1, 1);
    CHECK_THROWS_AS(conv2d(x, k2, 1, 0, 3), std::invalid_argument);
    auto k3 = T::uniform({2, 3, 6, 6}, rng, -1, 1);
    CHECK_THROWS_WITH_AS(conv2d(x, k3), doctest::Contains("smaller than kernel"),
                         std::invalid_argument);
}

TEST_CASE("backward: sum of squares gives 2x") {
    std::mt19937_64 rng(5);
    auto x = T::uniform({3, 4}, rng, -2, 2, true);
    auto loss = sum(mul(x, x));
    backward(loss);
    for (std::int64_t i = 0; i < x.numel(); ++i)
        CHECK(x.grad()[i] == doctest::Approx(2 * x.values()[i]).epsilon(1e-14));
}

TEST_CASE("backward: dead relu region has zero gradient") {
    auto x = T::from({4}, {-1.0, -0.5, -2.0, -3.0}, true);
    backward(sum(relu(x)));
    for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward rejects non-scalar loss") {
    auto x = T::filled({3}, 1.0, true);
    auto y = mul(x, x);
    CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("backward accumulates across calls without reset") {
    auto x = T::from({2}, {3.0, -1.0}, true);
    auto run = [&]() {
        auto loss = sum(mul(x, x));
        backward(loss);
    };
    run();
    const double g0 = x.grad()[0];
    run();
    CHECK(x.grad()[0] == doctest::Approx(2 * g0));
    x.zero_grad();
    run();
    CHECK(x.grad()[0] == doctest::Approx(g0));
}

TEST_CASE("finite_diff_check: linear function is exact") {
    std::mt19937_64 rng(11);
    // binary-exact coordinates and step, so x +- eps carries no rounding
    auto x = T::uniform({5}, rng, -1, 1);
    for (auto& v : x.values()) v = std::round(v * 1024.0) / 1024.0;
    const double eps = std::ldexp(1.0, -17);  // ~7.6e-6, within [1e-7, 1e-4]
    auto rep = finite_diff_check<double>([](const T& t) { return sum(t); }, x, eps);
    CHECK(rep.max_rel_err < 1e-12);
}

TEST_CASE("finite_diff_check: sigmoid composite under 1e-6") {
    std::mt19937_64 rng(13);
    auto x = T::uniform({4, 3}, rng, -2, 2);
    auto rep = finite_diff_check<double>([](const T& t) { return sum(sigmoid(t)); }, x, 1e-5);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("composite op graph matches finite differences") {
    std::mt19937_64 rng(17);
    auto w = T::uniform({4, 6}, rng, -1, 1);
    auto x = T::uniform({2, 3, 4}, rng, -1, 1);
    auto rep = finite_diff_check<double>(
        [&](const T& t) {
            auto h = matmul(t, w);                      // (2,3,6)
            auto s = softmax(h, 2);
            auto m = mean_axis(mul(s, exp(mul_scalar(h, 0.3))), 1);
            return sum(log(add_scalar(mul(m, m), 0.1)));
        },
        x, 1e-5);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("broadcasting follows trailing rules and rejects anything else") {
    auto a = T::filled({2, 3, 4}, 1.0);
    auto b = T::filled({3, 1}, 2.0);
    auto c = add(a, b);
    CHECK(c.shape() == Dims{2, 3, 4});
    CHECK(c.values()[0] == 3.0);
    auto bad = T::filled({2, 4}, 1.0);
    CHECK_THROWS_WITH_AS(add(a, bad), doctest::Contains("not broadcastable"), std::invalid_argument);
}

TEST_CASE("softmax rows sum to one") {
    std::mt19937_64 rng(19);
    auto x = T::uniform({5, 7}, rng, -4, 4);
    auto s = softmax(x, 1);
    for (int r = 0; r < 5; ++r) {
        double acc = 0;
        for (int c = 0; c < 7; ++c) acc += s.at(r, c);
        CHECK(acc == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("batch_norm eval mode is affine (superposition)") {
    std::mt19937_64 rng(23);
    auto gamma = T::uniform({3}, rng, 0.5, 1.5);
    auto beta = T::uniform({3}, rng, -0.5, 0.5);
    std::vector<double> rm{0.1, -0.2, 0.3}, rv{1.2, 0.8, 2.0};
    auto a = T::uniform({2, 3, 4, 4}, rng, -1, 1);
    auto b = T::uniform({2, 3, 4, 4}, rng, -1, 1);
    auto zero = T::zeros({2, 3, 4, 4});
    auto f = [&](const T& t) { return batch_norm(t, gamma, beta, rm, rv, false); };
    auto lhs = f(add(a, b));
    auto rhs = sub(add(f(a), f(b)), f(zero));
    for (std::int64_t i = 0; i < lhs.numel(); ++i)
        CHECK(lhs.values()[i] == doctest::Approx(rhs.values()[i]).epsilon(1e-12));
}

TEST_CASE("bilinear_sample exact at integer locations and patch centers") {
    auto feat = T::from({1, 1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
    auto loc = T::from({1, 2, 2}, {1.0, 0.0, 0.5, 0.5});
    auto out = bilinear_sample(feat, loc);
    CHECK(out.at(0, 0, 0) == 1.0);
    CHECK(out.at(0, 0, 1) == doctest::Approx(1.5).epsilon(1e-15));
}

TEST_CASE("float32 instantiation behaves") {
    std::mt19937_64 rng(29);
    auto x = Tensor<float>::uniform({2, 3, 5, 5}, rng, -1, 1, true);
    auto k = Tensor<float>::uniform({4, 3, 3, 3}, rng, -1, 1, true);
    auto y = conv2d(x, k, 1, 1);
    auto loss = sum(mul(y, y));
    backward(loss);
    CHECK(std::isfinite(static_cast<double>(loss.item())));
    CHECK(x.has_grad());
}

TEST_CASE("tensor snapshot roundtrip and header layout") {
    std::mt19937_64 rng(31);
    auto x = T::uniform({2, 3}, rng, -5, 5);
    std::ostringstream os(std::ios::binary);
    write_tensor(os, x);
    const std::string bytes = os.str();
    REQUIRE(bytes.size() == 4 + 8 + 2 * 8 + 6 * 8);
    CHECK(bytes.substr(0, 4) == "TNSR");
    CHECK(static_cast<unsigned char>(bytes[4]) == 2);  // rank, little-endian
    CHECK(static_cast<unsigned char>(bytes[12]) == 2);
    CHECK(static_cast<unsigned char>(bytes[20]) == 3);
    std::istringstream is(bytes, std::ios::binary);
    auto back = read_tensor<double>(is);
    REQUIRE(back.shape() == x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(back.values()[i] == x.values()[i]);
}

TEST_CASE("fft2: constant image concentrates at DC") {
    auto x = T::filled({1, 1, 4, 4}, 2.5);
    auto sp = fft2(x);
    CHECK(sp.re.at(0, 0, 0, 0) == doctest::Approx(2.5 * 16).epsilon(1e-12));
    for (std::int64_t i = 1; i < sp.re.numel(); ++i) {
        CHECK(std::abs(sp.re.values()[i]) < 1e-10);
        CHECK(std::abs(sp.im.values()[i]) < 1e-10);
    }
}

TEST_CASE("fft2: single-cycle cosine along width hits two conjugate bins") {
    const int W = 8;
    std::vector<double> vals(W);
    for (int w = 0; w < W; ++w) vals[w] = std::cos(2.0 * M_PI * w / W);
    auto x = T::from({1, 1, 1, W}, std::move(vals));
    auto sp = fft2(x);
    for (int w = 0; w < W; ++w) {
        const double expected_re = (w == 1 || w == W - 1) ? W / 2.0 : 0.0;
        CHECK(sp.re.at(0, 0, 0, w) == doctest::Approx(expected_re).epsilon(1e-10));
        CHECK(std::abs(sp.im.at(0, 0, 0, w)) < 1e-10);
    }
}

TEST_CASE("fft2 roundtrip and Parseval") {
    std::mt19937_64 rng(37);
    auto x = T::uniform({2, 3, 6, 5}, rng, -2, 2);  // non-power-of-two on purpose
    auto sp = fft2(x);
    auto back = ifft2(sp);
    double err = 0, imax = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        err = std::max(err, std::abs(back.re.values()[i] - x.values()[i]));
        imax = std::max(imax, std::abs(back.im.values()[i]));
    }
    CHECK(err < 1e-10);
    CHECK(imax < 1e-10);
    // sum |x|^2 == sum |X|^2 / (HW)
    const double hw = 6 * 5;
    double ex = 0, es = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i) ex += x.values()[i] * x.values()[i];
    for (std::int64_t i = 0; i < sp.re.numel(); ++i)
        es += sp.re.values()[i] * sp.re.values()[i] + sp.im.values()[i] * sp.im.values()[i];
    CHECK(std::abs(ex - es / hw) < 1e-8);
}

TEST_CASE("conv2d gradient passes finite differences") {
    std::mt19937_64 rng(41);
    auto k = T::uniform({2, 2, 3, 3}, rng, -1, 1);
    auto w = T::uniform({1, 2, 4, 4}, rng, -1, 1);
    auto rep = finite_diff_check<double>(
        [&](const T& x) { return sum(mul(w, conv2d(x, k, 1, 1, 2))); },
        T::uniform({1, 4, 4, 4}, rng, -1, 1), 1e-5);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_SUITE_END();
