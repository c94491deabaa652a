// Dense tensor with a reverse-mode autodiff tape.
//
// Design: every op records a closure on a dynamic tape (record on forward,
// replay backward). Tensors are cheap shared handles to nodes; a node owns
// the value buffer, an optional gradient buffer and the links to its
// parents. Creation order doubles as a topological order for the backward
// sweep. Scalar type is a template parameter: double for all verification
// suites, float for toy training.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace priordet {

using Dims = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Dims& d) {
    std::int64_t n = 1;
    for (auto s : d) n *= s;
    return n;
}

inline Dims strides_of(const Dims& d) {
    Dims st(d.size(), 1);
    for (std::int64_t i = static_cast<std::int64_t>(d.size()) - 2; i >= 0; --i)
        st[i] = st[i + 1] * d[i + 1];
    return st;
}

inline std::string dims_str(const Dims& d) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < d.size(); ++i) os << d[i] << (i + 1 < d.size() ? "," : "");
    os << ')';
    return os.str();
}

[[noreturn]] inline void fail_shape(const std::string& msg) { throw std::invalid_argument(msg); }

// Raised when a computation produces non-finite values (exit code 2 paths).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Thread-local switch: when disabled, ops do not record tape nodes.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

namespace detail {
inline std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> c{0};
    return c.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

template <typename S>
struct TensorNode {
    Dims shape;
    std::vector<S> value;
    std::vector<S> grad;  // allocated lazily; same length as value when present
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<TensorNode<S>>> parents;
    std::function<void()> backprop;  // reads this->grad, accumulates into parents

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
    bool is_leaf() const { return parents.empty(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
    }
};

template <typename S>
class Tensor {
public:
    using Scalar = S;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode<S>> n) : n_(std::move(n)) {}

    static Tensor zeros(Dims shape, bool requires_grad = false) {
        return filled(std::move(shape), S(0), requires_grad);
    }
    static Tensor filled(Dims shape, S v, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode<S>>();
        n->shape = std::move(shape);
        n->value.assign(static_cast<std::size_t>(numel_of(n->shape)), v);
        n->requires_grad = requires_grad;
        n->seq = detail::next_seq();
        return Tensor(std::move(n));
    }
    static Tensor from(Dims shape, std::vector<S> data, bool requires_grad = false) {
        if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
            fail_shape("Tensor::from: data length " + std::to_string(data.size()) +
                       " does not match shape " + dims_str(shape));
        auto n = std::make_shared<TensorNode<S>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        n->seq = detail::next_seq();
        return Tensor(std::move(n));
    }
    static Tensor scalar(S v, bool requires_grad = false) { return filled({1}, v, requires_grad); }

    template <typename Rng>
    static Tensor uniform(Dims shape, Rng& rng, S lo, S hi, bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
        for (auto& v : t.node()->value) v = static_cast<S>(dist(rng));
        return t;
    }
    template <typename Rng>
    static Tensor randn(Dims shape, Rng& rng, S stddev = S(1), bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
        for (auto& v : t.node()->value) v = static_cast<S>(dist(rng));
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Dims& shape() const { return n_->shape; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    std::int64_t dim(int i) const {
        if (i < 0) i += rank();
        return n_->shape[static_cast<std::size_t>(i)];
    }
    std::int64_t numel() const { return n_->numel(); }

    std::span<S> values() { return {n_->value.data(), n_->value.size()}; }
    std::span<const S> values() const { return {n_->value.data(), n_->value.size()}; }
    std::span<S> grad() {
        n_->ensure_grad();
        return {n_->grad.data(), n_->grad.size()};
    }
    std::span<const S> grad() const {
        if (n_->grad.size() != n_->value.size())
            throw std::runtime_error("Tensor::grad: gradient not populated");
        return {n_->grad.data(), n_->grad.size()};
    }
    bool has_grad() const { return n_->grad.size() == n_->value.size(); }

    S item() const {
        if (numel() != 1) fail_shape("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
        return n_->value[0];
    }

    // Multi-index access, for tests and scalar reference code.
    template <typename... Ix>
    S at(Ix... ix) const {
        return n_->value[flat_index({static_cast<std::int64_t>(ix)...})];
    }
    template <typename... Ix>
    S& at(Ix... ix) {
        return n_->value[flat_index({static_cast<std::int64_t>(ix)...})];
    }

    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        n_->requires_grad = rg;
        return *this;
    }
    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
    }

    // Value copy detached from the tape.
    Tensor detached() const {
        auto t = Tensor::from(n_->shape, n_->value, false);
        return t;
    }

    const std::shared_ptr<TensorNode<S>>& node() const { return n_; }

private:
    std::size_t flat_index(std::initializer_list<std::int64_t> ix) const {
        if (ix.size() != n_->shape.size())
            fail_shape("Tensor::at: expected " + std::to_string(n_->shape.size()) + " indices, got " +
                       std::to_string(ix.size()));
        auto st = strides_of(n_->shape);
        std::size_t k = 0, flat = 0;
        for (auto i : ix) {
            if (i < 0 || i >= n_->shape[k])
                fail_shape("Tensor::at: index " + std::to_string(i) + " out of bounds for dim " +
                           std::to_string(k) + " of " + dims_str(n_->shape));
            flat += static_cast<std::size_t>(i * st[k]);
            ++k;
        }
        return flat;
    }

    std::shared_ptr<TensorNode<S>> n_;
};

namespace detail {

// Build the result node of an op. Parents and the closure are recorded only
// when the tape is live and some parent participates in differentiation.
template <typename S>
Tensor<S> make_op_node(Dims shape, std::vector<S> value,
                       std::vector<std::shared_ptr<TensorNode<S>>> parents,
                       std::function<void()> (*make_backprop)(const std::shared_ptr<TensorNode<S>>&) = nullptr) {
    (void)make_backprop;
    auto t = Tensor<S>::from(std::move(shape), std::move(value), false);
    bool rg = false;
    if (grad_mode())
        for (auto& p : parents) rg = rg || (p && p->requires_grad);
    if (rg) {
        t.node()->requires_grad = true;
        t.node()->parents = std::move(parents);
    }
    return t;
}

}  // namespace detail

// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls;
// interior gradients are reset at the start of each sweep.
template <typename S>
void backward(const Tensor<S>& loss) {
    if (!loss.defined()) fail_shape("backward: undefined tensor");
    if (loss.numel() != 1) fail_shape("backward: loss must be scalar, got shape " + dims_str(loss.shape()));
    if (!loss.requires_grad())
        throw std::runtime_error("backward: loss does not require grad (no differentiable path)");

    using NodeP = std::shared_ptr<TensorNode<S>>;
    std::vector<NodeP> order;
    // Reachable requires_grad subgraph, deduplicated.
    std::unordered_set<const TensorNode<S>*> seen;
    auto visit = [&](const NodeP& n) {
        if (seen.insert(n.get()).second) order.push_back(n);
    };
    visit(loss.node());
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto& n = order[i];
        for (auto& p : n->parents)
            if (p && p->requires_grad) visit(p);
    }
    std::sort(order.begin(), order.end(),
              [](const NodeP& a, const NodeP& b) { return a->seq > b->seq; });

    for (auto& n : order) {
        if (!n->is_leaf()) {
            n->grad.assign(n->value.size(), S(0));
        } else {
            n->ensure_grad();
        }
    }
    loss.node()->grad[0] += S(1);
    for (auto& n : order)
        if (n->backprop) n->backprop();
}

}  // namespace priordet
