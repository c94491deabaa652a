// Central-difference gradient verification. The harness perturbs each
// coordinate of x, re-evaluates f, and compares against the tape gradient.
// Relative error uses max(1, |analytic|) in the denominator so tiny
// gradients do not blow the ratio up.

#pragma once

#include <functional>

#include "priordet/tensor.hpp"

namespace priordet {

template <typename S>
struct FdReport {
    double max_rel_err = 0.0;
    std::int64_t worst_coord = -1;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
};

// f must be deterministic; eps in [1e-7, 1e-4] is sensible for 64-bit.
template <typename S>
FdReport<S> finite_diff_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, Tensor<S> x,
                              double eps = 1e-5) {
    x.set_requires_grad(true);
    x.zero_grad();
    auto loss = f(x);
    if (loss.numel() != 1) fail_shape("finite_diff_check: f must return a scalar");
    backward(loss);
    std::vector<S> analytic(x.grad().begin(), x.grad().end());

    FdReport<S> rep;
    auto xv = x.values();
    NoGradGuard ng;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const S keep = xv[i];
        xv[i] = keep + static_cast<S>(eps);
        const double fp = static_cast<double>(f(x).item());
        xv[i] = keep - static_cast<S>(eps);
        const double fm = static_cast<double>(f(x).item());
        xv[i] = keep;
        const double num = (fp - fm) / (2.0 * eps);
        const double ana = static_cast<double>(analytic[i]);
        if (!std::isfinite(num) || !std::isfinite(ana))
            throw std::runtime_error("finite_diff_check: non-finite value at coordinate " +
                                     std::to_string(i));
        const double rel = std::abs(ana - num) / std::max(1.0, std::abs(ana));
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_coord = i;
            rep.analytic_at_worst = ana;
            rep.numeric_at_worst = num;
        }
    }
    return rep;
}

// Convenience for multi-input functions: checks the gradient w.r.t. each
// listed tensor in turn, holding the others fixed.
template <typename S>
double finite_diff_check_many(const std::function<Tensor<S>()>& f, std::vector<Tensor<S>> inputs,
                              double eps = 1e-5) {
    double worst = 0.0;
    for (auto& inp : inputs) {
        inp.set_requires_grad(true);
        inp.zero_grad();
    }
    auto loss = f();
    if (loss.numel() != 1) fail_shape("finite_diff_check_many: f must return a scalar");
    backward(loss);
    NoGradGuard ng;
    for (auto& inp : inputs) {
        std::vector<S> analytic(inp.grad().begin(), inp.grad().end());
        auto xv = inp.values();
        for (std::int64_t i = 0; i < inp.numel(); ++i) {
            const S keep = xv[i];
            xv[i] = keep + static_cast<S>(eps);
            const double fp = static_cast<double>(f().item());
            xv[i] = keep - static_cast<S>(eps);
            const double fm = static_cast<double>(f().item());
            xv[i] = keep;
            const double num = (fp - fm) / (2.0 * eps);
            const double ana = static_cast<double>(analytic[i]);
            if (!std::isfinite(num) || !std::isfinite(ana))
                throw std::runtime_error("finite_diff_check_many: non-finite value at coordinate " +
                                         std::to_string(i));
            worst = std::max(worst, std::abs(ana - num) / std::max(1.0, std::abs(ana)));
        }
    }
    return worst;
}

}  // namespace priordet
