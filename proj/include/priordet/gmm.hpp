// 2-D Gaussian mixture over nodule geometry: aspect ratio r = h/w against
// log-width. Fitting is plain EM with k-means++ seeding; a fitted prior is
// immutable and freely shareable across threads.

#pragma once

#include <Eigen/Dense>
#include <iostream>
#include <nlohmann/json.hpp>

#include "priordet/tensor.hpp"

namespace priordet {

struct PriorFactors {
    double r_tilde = 1.0;  // aspect-ratio factor, dimensionless, > 0
    double w_tilde = 1.0;  // width factor, dimensionless, > 0
};

struct FactorBounds {
    double w_lo = 0.1, w_hi = 2.0;
    double r_lo = 0.2, r_hi = 5.0;
};

struct GmmPrior2D {
    int M = 0;
    std::vector<double> weights;                 // pi_m, sums to 1
    std::vector<Eigen::Vector2d> means;          // (r, log w)
    std::vector<Eigen::Matrix2d> covs;           // symmetric positive definite
    double w_ref = 1.0;                          // reference width in pixels

    void validate() const {
        if (M <= 0 || static_cast<int>(weights.size()) != M ||
            static_cast<int>(means.size()) != M || static_cast<int>(covs.size()) != M)
            throw std::invalid_argument("GmmPrior2D: inconsistent component count");
        double s = 0;
        for (double w : weights) {
            if (w < 0) throw std::invalid_argument("GmmPrior2D: negative mixture weight");
            s += w;
        }
        if (std::abs(s - 1.0) > 1e-9)
            throw std::invalid_argument("GmmPrior2D: weights sum to " + std::to_string(s));
        for (const auto& c : covs) {
            Eigen::LLT<Eigen::Matrix2d> llt(c);
            if (llt.info() != Eigen::Success)
                throw std::invalid_argument("GmmPrior2D: covariance not positive definite");
        }
    }
};

namespace detail {

inline double log_gauss2(const Eigen::Vector2d& x, const Eigen::Vector2d& mu,
                         const Eigen::Matrix2d& cov) {
    const double det = cov.determinant();
    const Eigen::Vector2d d = x - mu;
    const double maha = d.dot(cov.inverse() * d);
    return -std::log(2.0 * M_PI) - 0.5 * std::log(det) - 0.5 * maha;
}

inline Eigen::Matrix2d floor_covariance(Eigen::Matrix2d c, double floor = 1e-6) {
    c = 0.5 * (c + c.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(c);
    Eigen::Vector2d ev = es.eigenvalues().cwiseMax(floor);
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// Per-point log density of Eq.-style mixture evaluated with log-sum-exp.
inline double log_density(const GmmPrior2D& g, const Eigen::Vector2d& x) {
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(g.M);
    for (int m = 0; m < g.M; ++m) {
        terms[m] = std::log(std::max(g.weights[m], 1e-300)) +
                   detail::log_gauss2(x, g.means[m], g.covs[m]);
        mx = std::max(mx, terms[m]);
    }
    double s = 0;
    for (double t : terms) s += std::exp(t - mx);
    return mx + std::log(s);
}

inline double log_likelihood(const GmmPrior2D& g, const std::vector<Eigen::Vector2d>& samples) {
    double ll = 0;
    for (const auto& x : samples) ll += log_density(g, x);
    return ll;
}

struct GmmFitResult {
    GmmPrior2D prior;
    std::vector<double> ll_trace;  // log-likelihood at the start of each iteration
    int iterations = 0;
    bool converged = false;
    bool degenerate = false;
};

// EM fit. Initialization: k-means++ seeding for the means, uniform weights,
// global covariance for every component. Covariance eigenvalues are floored
// at 1e-6 after every M-step.
inline GmmFitResult fit_em(const std::vector<Eigen::Vector2d>& samples, int M, int max_iter = 200,
                           double tol = 1e-8, std::uint64_t seed = 0) {
    const int n = static_cast<int>(samples.size());
    if (M < 1) throw std::invalid_argument("fit_em: M must be >= 1");
    if (n < 10 * M)
        throw std::invalid_argument("fit_em: need at least " + std::to_string(10 * M) +
                                    " samples for M=" + std::to_string(M) + ", got " +
                                    std::to_string(n));
    for (const auto& s : samples)
        if (!(s[0] > 0) || !std::isfinite(s[0]) || !std::isfinite(s[1]))
            throw std::invalid_argument("fit_em: aspect ratios must be positive and finite");

    GmmFitResult res;
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (const auto& s : samples) mean += s;
    mean /= n;
    Eigen::Matrix2d scatter = Eigen::Matrix2d::Zero();
    for (const auto& s : samples) scatter += (s - mean) * (s - mean).transpose();
    scatter /= n;

    // Degenerate input: all points identical.
    bool all_same = true;
    for (const auto& s : samples)
        if ((s - samples[0]).norm() > 1e-12) {
            all_same = false;
            break;
        }
    if (all_same) {
        std::cerr << "fit_em: degenerate input (all points identical); returning a single floored "
                     "component\n";
        GmmPrior2D g;
        g.M = 1;
        g.weights = {1.0};
        g.means = {samples[0]};
        g.covs = {detail::floor_covariance(Eigen::Matrix2d::Zero())};
        res.prior = std::move(g);
        res.degenerate = true;
        res.ll_trace.push_back(log_likelihood(res.prior, samples));
        return res;
    }

    std::mt19937_64 rng(seed);
    GmmPrior2D g;
    g.M = M;
    g.weights.assign(M, 1.0 / M);
    g.covs.assign(M, detail::floor_covariance(scatter));
    // k-means++ seeding
    {
        std::uniform_int_distribution<int> pick(0, n - 1);
        g.means.push_back(samples[pick(rng)]);
        std::vector<double> d2(n);
        while (static_cast<int>(g.means.size()) < M) {
            double total = 0;
            for (int i = 0; i < n; ++i) {
                double best = std::numeric_limits<double>::infinity();
                for (const auto& c : g.means) best = std::min(best, (samples[i] - c).squaredNorm());
                d2[i] = best;
                total += best;
            }
            std::uniform_real_distribution<double> u(0.0, total);
            double target = u(rng), acc = 0;
            int chosen = n - 1;
            for (int i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc >= target) {
                    chosen = i;
                    break;
                }
            }
            g.means.push_back(samples[chosen]);
        }
    }

    Eigen::MatrixXd resp(n, M);
    double prev_ll = -std::numeric_limits<double>::infinity();
    for (int it = 0; it < max_iter; ++it) {
        // E-step with log-sum-exp; also yields the current log-likelihood.
        double ll = 0;
        for (int i = 0; i < n; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int m = 0; m < M; ++m) {
                resp(i, m) = std::log(std::max(g.weights[m], 1e-300)) +
                             detail::log_gauss2(samples[i], g.means[m], g.covs[m]);
                mx = std::max(mx, resp(i, m));
            }
            double z = 0;
            for (int m = 0; m < M; ++m) z += std::exp(resp(i, m) - mx);
            const double lz = mx + std::log(z);
            ll += lz;
            for (int m = 0; m < M; ++m) resp(i, m) = std::exp(resp(i, m) - lz);
        }
        res.ll_trace.push_back(ll);

        // Convergence is judged on the likelihood before touching the
        // parameters, so a huge tol stops after exactly one update.
        if (it > 0 && ll - prev_ll < tol) {
            res.converged = true;
            break;
        }
        prev_ll = ll;
        res.iterations = it + 1;

        // M-step
        for (int m = 0; m < M; ++m) {
            const double nm = resp.col(m).sum();
            g.weights[m] = nm / n;
            Eigen::Vector2d mu = Eigen::Vector2d::Zero();
            for (int i = 0; i < n; ++i) mu += resp(i, m) * samples[i];
            mu /= std::max(nm, 1e-300);
            Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
            for (int i = 0; i < n; ++i) {
                const Eigen::Vector2d d = samples[i] - mu;
                cov += resp(i, m) * d * d.transpose();
            }
            cov /= std::max(nm, 1e-300);
            g.means[m] = mu;
            g.covs[m] = detail::floor_covariance(cov);
        }
    }
    res.prior = std::move(g);
    res.prior.validate();
    return res;
}

// Draws (r_prior, w_prior) pairs; w_prior stays in log-width coordinates,
// exponentiation happens in normalize_factors.
template <typename Rng>
std::vector<Eigen::Vector2d> sample_prior(const GmmPrior2D& g, Rng& rng, int count) {
    if (count < 1) throw std::invalid_argument("sample_prior: count must be >= 1");
    std::vector<Eigen::Vector2d> out;
    out.reserve(count);
    std::discrete_distribution<int> pick(g.weights.begin(), g.weights.end());
    std::normal_distribution<double> unit(0.0, 1.0);
    for (int i = 0; i < count; ++i) {
        const int m = pick(rng);
        const Eigen::LLT<Eigen::Matrix2d> llt(g.covs[m]);
        const Eigen::Vector2d z(unit(rng), unit(rng));
        out.push_back(g.means[m] + llt.matrixL() * z);
    }
    return out;
}

// w_tilde = clip(exp(w_prior)/w_ref, ...), r_tilde = clip(r_prior, ...).
inline PriorFactors normalize_factors(double r_prior, double w_prior, double w_ref,
                                      const FactorBounds& b = {}) {
    if (!std::isfinite(r_prior) || !std::isfinite(w_prior))
        throw std::invalid_argument("normalize_factors: non-finite prior draw");
    if (!(w_ref > 0)) throw std::invalid_argument("normalize_factors: w_ref must be positive");
    PriorFactors f;
    f.w_tilde = std::clamp(std::exp(w_prior) / w_ref, b.w_lo, b.w_hi);
    f.r_tilde = std::clamp(r_prior, b.r_lo, b.r_hi);
    return f;
}

// ---------------------------------------------------------------------------
// Prior file: {"M":..., "weights":[...], "means":[[r,logw],...],
//              "covs":[[[a,b],[b,c]],...], "w_ref":...}
// ---------------------------------------------------------------------------

inline nlohmann::json prior_to_json(const GmmPrior2D& g) {
    nlohmann::json j;
    j["M"] = g.M;
    j["weights"] = g.weights;
    auto means = nlohmann::json::array();
    for (const auto& m : g.means) means.push_back({m[0], m[1]});
    j["means"] = means;
    auto covs = nlohmann::json::array();
    for (const auto& c : g.covs)
        covs.push_back({{c(0, 0), c(0, 1)}, {c(1, 0), c(1, 1)}});
    j["covs"] = covs;
    j["w_ref"] = g.w_ref;
    return j;
}

inline GmmPrior2D prior_from_json(const nlohmann::json& j) {
    GmmPrior2D g;
    g.M = j.at("M").get<int>();
    g.weights = j.at("weights").get<std::vector<double>>();
    for (const auto& m : j.at("means")) g.means.push_back(Eigen::Vector2d(m[0], m[1]));
    for (const auto& c : j.at("covs")) {
        Eigen::Matrix2d cm;
        cm << c[0][0], c[0][1], c[1][0], c[1][1];
        g.covs.push_back(cm);
    }
    g.w_ref = j.at("w_ref").get<double>();
    g.validate();
    return g;
}

}  // namespace priordet
