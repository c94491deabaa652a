#include <doctest.h>

#include "priordet/gmm.hpp"
#include "oracles.hpp"

using namespace priordet;
using oracles::known_mixture;
using oracles::align_components;



TEST_SUITE_BEGIN("gmm");

TEST_CASE("EM recovers a known 3-component mixture") {
    const auto truth = known_mixture();
    std::mt19937_64 rng(424242);
    const auto samples = sample_prior(truth, rng, 5000);
    const auto fit = fit_em(samples, 3, 200, 1e-9, 7);
    REQUIRE(fit.prior.M == 3);
    const auto perm = align_components(fit.prior, truth);
    for (int m = 0; m < 3; ++m) {
        CHECK((fit.prior.means[perm[m]] - truth.means[m]).norm() < 0.05);
        CHECK(std::abs(fit.prior.weights[perm[m]] - truth.weights[m]) < 0.03);
    }
    for (std::size_t t = 1; t < fit.ll_trace.size(); ++t)
        CHECK(fit.ll_trace[t] >= fit.ll_trace[t - 1] - 1e-9);
}

TEST_CASE("M=1 reduces to the closed-form mean and covariance") {
    std::mt19937_64 rng(99);
    std::vector<Eigen::Vector2d> pts;
    std::normal_distribution<double> n(0, 1);
    for (int i = 0; i < 500; ++i) pts.emplace_back(2.0 + 0.3 * n(rng), -1.0 + 0.7 * n(rng));
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (const auto& p : pts) mean += p;
    mean /= pts.size();
    Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
    for (const auto& p : pts) cov += (p - mean) * (p - mean).transpose();
    cov /= pts.size();

    const auto fit = fit_em(pts, 1, 50, 1e-12, 0);
    CHECK((fit.prior.means[0] - mean).norm() < 1e-10);
    CHECK((fit.prior.covs[0] - cov).norm() < 1e-10);
    CHECK(fit.prior.weights[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("infinite tolerance stops after exactly one parameter update") {
    const auto truth = known_mixture();
    std::mt19937_64 rng(5);
    const auto samples = sample_prior(truth, rng, 500);
    const auto fit = fit_em(samples, 3, 100, std::numeric_limits<double>::infinity(), 3);
    CHECK(fit.iterations == 1);
    CHECK(fit.converged);
}

TEST_CASE("simplex and PSD invariants hold after every iteration") {
    const auto truth = known_mixture();
    std::mt19937_64 rng(8);
    const auto samples = sample_prior(truth, rng, 600);
    std::vector<double> prev_trace;
    for (int iters = 1; iters <= 6; ++iters) {
        const auto fit = fit_em(samples, 3, iters, -1.0, 11);  // tol < 0: never early-stop
        CHECK_NOTHROW(fit.prior.validate());
        double s = 0;
        for (double w : fit.prior.weights) s += w;
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        // Deterministic prefix property: the trace extends the previous run.
        for (std::size_t t = 0; t < prev_trace.size(); ++t)
            CHECK(fit.ll_trace[t] == doctest::Approx(prev_trace[t]).epsilon(1e-12));
        prev_trace = fit.ll_trace;
    }
}

TEST_CASE("degenerate input collapses to a floored single component") {
    std::vector<Eigen::Vector2d> pts(40, Eigen::Vector2d(1.3, 2.0));
    const auto fit = fit_em(pts, 3, 50, 1e-8, 0);
    CHECK(fit.degenerate);
    CHECK(fit.prior.M == 1);
    CHECK(fit.prior.means[0][0] == doctest::Approx(1.3));
    CHECK(fit.prior.covs[0](0, 0) == doctest::Approx(1e-6));
    CHECK_NOTHROW(fit.prior.validate());
}

TEST_CASE("fit_em validates inputs") {
    std::vector<Eigen::Vector2d> few(5, Eigen::Vector2d(1.0, 2.0));
    CHECK_THROWS_AS(fit_em(few, 1, 10, 1e-8, 0), std::invalid_argument);
    std::vector<Eigen::Vector2d> bad(20, Eigen::Vector2d(1.0, 2.0));
    bad[3][0] = -0.5;
    CHECK_THROWS_AS(fit_em(bad, 1, 10, 1e-8, 0), std::invalid_argument);
}

TEST_CASE("sampling a point mass returns the mean") {
    GmmPrior2D g;
    g.M = 1;
    g.weights = {1.0};
    g.means = {Eigen::Vector2d(0.9, 2.2)};
    g.covs = {detail::floor_covariance(Eigen::Matrix2d::Zero())};
    std::mt19937_64 rng(1);
    for (const auto& s : sample_prior(g, rng, 50)) {
        CHECK(s[0] == doctest::Approx(0.9).epsilon(1e-2));
        CHECK(s[1] == doctest::Approx(2.2).epsilon(1e-2));
    }
}

TEST_CASE("law of large numbers: empirical mean within three standard errors") {
    const auto g = known_mixture();
    Eigen::Vector2d mix_mean = Eigen::Vector2d::Zero();
    for (int m = 0; m < g.M; ++m) mix_mean += g.weights[m] * g.means[m];
    // mixture variance of the r coordinate
    double var_r = 0;
    for (int m = 0; m < g.M; ++m)
        var_r += g.weights[m] * (g.covs[m](0, 0) + std::pow(g.means[m][0] - mix_mean[0], 2));
    const int n = 100000;
    std::mt19937_64 rng(31337);
    const auto samples = sample_prior(g, rng, n);
    double emp = 0;
    for (const auto& s : samples) emp += s[0];
    emp /= n;
    CHECK(std::abs(emp - mix_mean[0]) < 3.0 * std::sqrt(var_r / n));
}

TEST_CASE("fixed seed gives identical sample sequences") {
    const auto g = known_mixture();
    std::mt19937_64 r1(77), r2(77);
    const auto a = sample_prior(g, r1, 64);
    const auto b = sample_prior(g, r2, 64);
    for (int i = 0; i < 64; ++i) CHECK((a[i] - b[i]).norm() == 0.0);
}

TEST_CASE("normalize_factors fixed points and clipping") {
    const double w_ref = 12.0;
    auto f1 = normalize_factors(1.0, std::log(w_ref), w_ref);
    CHECK(f1.w_tilde == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(f1.r_tilde == doctest::Approx(1.0).epsilon(1e-12));
    auto f2 = normalize_factors(1.0, std::log(w_ref) + 10.0, w_ref);
    CHECK(f2.w_tilde == 2.0);  // saturated at the upper clip
    auto f3 = normalize_factors(9.0, std::log(w_ref), w_ref);
    CHECK(f3.r_tilde == 5.0);
    CHECK_THROWS_AS(normalize_factors(std::nan(""), 0.0, w_ref), std::invalid_argument);
    CHECK_THROWS_AS(normalize_factors(1.0, 0.0, -1.0), std::invalid_argument);
}

TEST_CASE("sample/normalize composition stays finite and inside bounds") {
    const auto g = known_mixture();
    std::mt19937_64 rng(13);
    FactorBounds b;
    const auto draws = sample_prior(g, rng, 1000);
    for (const auto& d : draws) {
        const auto f = normalize_factors(d[0], d[1], g.w_ref, b);
        CHECK(std::isfinite(f.w_tilde));
        CHECK(std::isfinite(f.r_tilde));
        CHECK(f.w_tilde >= b.w_lo);
        CHECK(f.w_tilde <= b.w_hi);
        CHECK(f.r_tilde >= b.r_lo);
        CHECK(f.r_tilde <= b.r_hi);
    }
}

TEST_CASE("log density of a unit Gaussian at its mean") {
    GmmPrior2D g;
    g.M = 1;
    g.weights = {1.0};
    g.means = {Eigen::Vector2d(0.5, -0.5)};
    g.covs = {Eigen::Matrix2d::Identity()};
    CHECK(log_density(g, g.means[0]) == doctest::Approx(-std::log(2 * M_PI)).epsilon(1e-12));
}

TEST_CASE("mixture log likelihood dominates every weighted single component") {
    const auto g = known_mixture();
    std::mt19937_64 rng(17);
    const auto samples = sample_prior(g, rng, 300);
    const double ll_mix = log_likelihood(g, samples);
    for (int m = 0; m < g.M; ++m) {
        double ll_single = 0;
        for (const auto& x : samples)
            ll_single += std::log(g.weights[m]) + detail::log_gauss2(x, g.means[m], g.covs[m]);
        CHECK(ll_mix >= ll_single);
    }
}

TEST_CASE("prior JSON roundtrip") {
    const auto g = known_mixture();
    const auto j = prior_to_json(g);
    const auto back = prior_from_json(j);
    CHECK(back.M == g.M);
    for (int m = 0; m < g.M; ++m) {
        CHECK((back.means[m] - g.means[m]).norm() == 0.0);
        CHECK((back.covs[m] - g.covs[m]).norm() == 0.0);
        CHECK(back.weights[m] == g.weights[m]);
    }
    CHECK(back.w_ref == g.w_ref);
    CHECK(j.contains("M"));
    CHECK(j.contains("weights"));
    CHECK(j.contains("means"));
    CHECK(j.contains("covs"));
    CHECK(j.contains("w_ref"));
}

TEST_SUITE_END();
