// Small module layer on top of the tensor ops: named parameter collection,
// init helpers, the usual layers and an AdamW optimizer. Modules are plain
// structs; forward passes are free of hidden global state so distinct models
// can run on distinct threads.

#pragma once

#include "priordet/nn_ops.hpp"

namespace priordet {

template <typename S>
struct ParamRef {
    std::string name;
    Tensor<S> tensor;
};

template <typename S>
using ParamList = std::vector<ParamRef<S>>;

// Non-gradient state (batch-norm running stats); pointers stay valid for the
// lifetime of the owning module.
template <typename S>
using BufferList = std::vector<std::pair<std::string, std::vector<S>*>>;

template <typename S>
void add_param(ParamList<S>& out, const std::string& name, const Tensor<S>& t) {
    out.push_back({name, t});
}

// Forward-pass context: training flag plus the RNG stream used by the
// stochastic pieces (DropPath, prior sampling).
struct TrainContext {
    bool training = false;
    std::mt19937_64* rng = nullptr;
};

namespace init {

// Kaiming-style uniform fan-in init.
template <typename S, typename Rng>
Tensor<S> kaiming(Dims shape, std::int64_t fan_in, Rng& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
    return Tensor<S>::uniform(std::move(shape), rng, static_cast<S>(-bound), static_cast<S>(bound), true);
}

}  // namespace init

// ---------------------------------------------------------------------------

template <typename S>
struct Linear {
    Tensor<S> weight, bias;

    Linear() = default;
    template <typename Rng>
    Linear(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias = true) {
        weight = init::kaiming<S>({out, in}, in, rng);
        if (with_bias) bias = Tensor<S>::zeros({out}, true);
    }
    static Linear zeroed(std::int64_t in, std::int64_t out, bool with_bias = true) {
        Linear l;
        l.weight = Tensor<S>::zeros({out, in}, true);
        if (with_bias) l.bias = Tensor<S>::zeros({out}, true);
        return l;
    }
    Tensor<S> forward(const Tensor<S>& x) const { return linear(x, weight, bias); }
    void params(ParamList<S>& out, const std::string& p) const {
        add_param(out, p + ".weight", weight);
        if (bias.defined()) add_param(out, p + ".bias", bias);
    }
};

template <typename S>
struct Conv2d {
    Tensor<S> weight, bias;
    std::int64_t stride = 1, pad = 0, groups = 1;

    Conv2d() = default;
    template <typename Rng>
    Conv2d(std::int64_t cin, std::int64_t cout, std::int64_t k, Rng& rng, std::int64_t stride_ = 1,
           std::int64_t pad_ = 0, std::int64_t groups_ = 1, bool with_bias = true)
        : stride(stride_), pad(pad_), groups(groups_) {
        const std::int64_t fan_in = (cin / groups_) * k * k;
        weight = init::kaiming<S>({cout, cin / groups_, k, k}, fan_in, rng);
        if (with_bias) bias = Tensor<S>::zeros({cout}, true);
    }
    Tensor<S> forward(const Tensor<S>& x) const { return conv2d(x, weight, stride, pad, groups, bias); }
    void params(ParamList<S>& out, const std::string& p) const {
        add_param(out, p + ".weight", weight);
        if (bias.defined()) add_param(out, p + ".bias", bias);
    }
};

template <typename S>
struct LayerNorm {
    Tensor<S> gamma, beta;
    explicit LayerNorm(std::int64_t n = 0) {
        if (n > 0) {
            gamma = Tensor<S>::filled({n}, S(1), true);
            beta = Tensor<S>::zeros({n}, true);
        }
    }
    Tensor<S> forward(const Tensor<S>& x) const { return layer_norm(x, gamma, beta); }
    void params(ParamList<S>& out, const std::string& p) const {
        add_param(out, p + ".gamma", gamma);
        add_param(out, p + ".beta", beta);
    }
};

template <typename S>
struct BatchNorm2d {
    Tensor<S> gamma, beta;
    std::vector<S> running_mean, running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNorm2d(std::int64_t c = 0) {
        if (c > 0) {
            gamma = Tensor<S>::filled({c}, S(1), true);
            beta = Tensor<S>::zeros({c}, true);
            running_mean.assign(c, S(0));
            running_var.assign(c, S(1));
        }
    }
    Tensor<S> forward(const Tensor<S>& x, bool training) {
        return batch_norm(x, gamma, beta, running_mean, running_var, training, momentum, eps);
    }
    void params(ParamList<S>& out, const std::string& p) const {
        add_param(out, p + ".gamma", gamma);
        add_param(out, p + ".beta", beta);
    }
    // Running stats travel with checkpoints but take no gradient.
    void buffers(BufferList<S>& out, const std::string& p) {
        out.push_back({p + ".running_mean", &running_mean});
        out.push_back({p + ".running_var", &running_var});
    }
};

// Stochastic depth: per-sample identity-vs-block selection. In training each
// sample keeps the branch with probability keep_prob (rescaled); in eval the
// branch always passes through unscaled.
template <typename S>
Tensor<S> droppath(const Tensor<S>& branch, double keep_prob, const TrainContext& ctx) {
    if (!ctx.training || keep_prob >= 1.0) return branch;
    if (keep_prob <= 0.0) fail_shape("droppath: keep probability must be positive");
    const std::int64_t n = branch.dim(0);
    std::vector<S> mask(static_cast<std::size_t>(n));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& m : mask)
        m = u(*ctx.rng) < keep_prob ? static_cast<S>(1.0 / keep_prob) : S(0);
    Dims mshape(branch.rank(), 1);
    mshape[0] = n;
    return mul(branch, Tensor<S>::from(std::move(mshape), std::move(mask)));
}

// ---------------------------------------------------------------------------
// AdamW: decoupled weight decay, the DETR-family training default.
// ---------------------------------------------------------------------------

template <typename S>
class AdamW {
public:
    AdamW(ParamList<S> params, double lr, double weight_decay, double beta1 = 0.9,
          double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
        for (auto& p : params_) {
            m_.emplace_back(p.tensor.numel(), S(0));
            v_.emplace_back(p.tensor.numel(), S(0));
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    // Global L2 gradient clipping; returns the pre-clip norm.
    double clip_grad_norm(double max_norm) {
        double sq = 0.0;
        for (auto& p : params_) {
            if (!p.tensor.has_grad()) continue;
            for (S g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
        }
        const double norm = std::sqrt(sq);
        if (norm > max_norm && norm > 0.0) {
            const S scale = static_cast<S>(max_norm / norm);
            for (auto& p : params_) {
                if (!p.tensor.has_grad()) continue;
                for (auto& g : p.tensor.grad()) g *= scale;
            }
        }
        return norm;
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k].tensor;
            if (!p.has_grad()) continue;
            auto val = p.values();
            auto grad = p.grad();
            for (std::int64_t i = 0; i < p.numel(); ++i) {
                const double g = static_cast<double>(grad[i]);
                m_[k][i] = static_cast<S>(b1_ * m_[k][i] + (1 - b1_) * g);
                v_[k][i] = static_cast<S>(b2_ * v_[k][i] + (1 - b2_) * g * g);
                const double mhat = m_[k][i] / bc1;
                const double vhat = v_[k][i] / bc2;
                double x = static_cast<double>(val[i]);
                x -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * x);
                val[i] = static_cast<S>(x);
            }
        }
    }

    const ParamList<S>& params() const { return params_; }

private:
    ParamList<S> params_;
    std::vector<std::vector<S>> m_, v_;
    double lr_, wd_, b1_, b2_, eps_;
    long t_ = 0;
};

}  // namespace priordet
