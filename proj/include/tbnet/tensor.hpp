#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "tbnet/common.hpp"

namespace tbnet {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0)
            throw ShapeError(strcat_msg("shape ", shape_to_string(shape),
                                        " has non-positive dimension ", d));
        n *= d;
    }
    return n;
}

/// Dense row-major tensor with optional gradient, templated on the scalar
/// type. float is the training default; double backs the gradient-check
/// suites. Ops build a reverse-mode graph through parent links; backward()
/// replays it in reverse topological order.
template <typename S>
class Tensor : public std::enable_shared_from_this<Tensor<S>> {
public:
    using Ptr = std::shared_ptr<Tensor<S>>;
    using Scalar = S;

    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;           // same length as data once materialized
    bool requires_grad = false;
    std::string name;              // optional, used in optimizer diagnostics

    // Autodiff bookkeeping, populated by ops.
    std::vector<Ptr> parents;
    std::function<void()> backward_fn;

    Tensor() = default;

    Tensor(Shape s, std::vector<S> d, bool rg = false)
        : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError(strcat_msg("tensor data length ", data.size(),
                                        " does not match shape ", shape_to_string(shape)));
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape[i]; }
    size_t rank() const { return shape.size(); }

    static Ptr zeros(Shape s, bool rg = false) {
        auto t = std::make_shared<Tensor<S>>();
        t->shape = std::move(s);
        t->data.assign(static_cast<size_t>(shape_numel(t->shape)), S(0));
        t->requires_grad = rg;
        return t;
    }

    static Ptr full(Shape s, S value, bool rg = false) {
        auto t = zeros(std::move(s), rg);
        std::fill(t->data.begin(), t->data.end(), value);
        return t;
    }

    static Ptr ones(Shape s, bool rg = false) { return full(std::move(s), S(1), rg); }

    static Ptr from(Shape s, std::vector<S> d, bool rg = false) {
        return std::make_shared<Tensor<S>>(std::move(s), std::move(d), rg);
    }

    static Ptr randn(Shape s, Rng& rng, S stddev = S(1), bool rg = false) {
        auto t = zeros(std::move(s), rg);
        for (auto& v : t->data) v = static_cast<S>(rng.normal()) * stddev;
        return t;
    }

    /// Deep copy of value state. Autodiff links are not cloned.
    Ptr clone_detached() const {
        auto t = std::make_shared<Tensor<S>>();
        t->shape = shape;
        t->data = data;
        t->requires_grad = requires_grad;
        t->name = name;
        return t;
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }

    void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }

    bool same_shape(const Tensor<S>& other) const { return shape == other.shape; }
};

template <typename S>
using TensorPtr = std::shared_ptr<Tensor<S>>;

/// True when any input wants gradients; outputs of ops inherit this.
template <typename S>
bool any_requires_grad(std::initializer_list<TensorPtr<S>> ts) {
    for (const auto& t : ts)
        if (t && t->requires_grad) return true;
    return false;
}

/// Run reverse-mode accumulation from a scalar loss node.
template <typename S>
void backward(const TensorPtr<S>& loss) {
    if (loss->numel() != 1)
        throw ShapeError(strcat_msg("backward() expects a scalar, got shape ",
                                    shape_to_string(loss->shape)));

    // Iterative post-order DFS; recursion depth would track graph depth.
    std::vector<Tensor<S>*> order;
    std::unordered_set<Tensor<S>*> visited;
    std::vector<std::pair<Tensor<S>*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor<S>* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss->ensure_grad();
    loss->grad[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) {
            (*it)->ensure_grad();
            (*it)->backward_fn();
        }
    }
}

/// Drop autodiff links so intermediate graph memory can be reclaimed.
template <typename S>
void detach_graph(const TensorPtr<S>& t) {
    t->parents.clear();
    t->backward_fn = nullptr;
}

} // namespace tbnet
