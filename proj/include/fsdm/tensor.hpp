#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fsdm/errors.hpp"

namespace fsdm {

// Reverse-mode autodiff over dense row-major tensors. Ops record a backward
// closure on the output node; backward() replays them in reverse topological
// order, accumulating gradients additively over fan-out. Gradients live in a
// side table keyed by node, never inside the nodes themselves, so forward
// passes over shared parameters stay read-only and thread-safe.

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

// Disables graph recording for the current scope (inference, data prep).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
class Gradients;

template <class T>
struct TensorNode {
    std::vector<int> shape;
    std::vector<T> value;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    // Adds this node's contribution (grad_out) to its parents' accumulators.
    std::function<void(const TensorNode<T>&, const std::vector<T>&, Gradients<T>&)> backward_fn;
};

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::int64_t shape_numel(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

template <class T>
void check_finite(const char* op, const std::vector<T>& v) {
    for (const T& x : v) {
        if (!std::isfinite(static_cast<double>(x))) {
            throw NumericError(std::string(op) + ": non-finite value produced");
        }
    }
}

template <class T>
class Tensor {
public:
    Tensor() : node_(std::make_shared<TensorNode<T>>()) {}

    explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static Tensor filled(std::vector<int> shape, T v, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode<T>>();
        n->value.assign(static_cast<std::size_t>(shape_numel(shape)), v);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from_data(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
            throw DimensionError("Tensor: shape " + shape_str(shape) + " does not match data length " +
                                 std::to_string(data.size()));
        }
        check_finite("Tensor", data);
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(T v, bool requires_grad = false) { return from_data({1}, {v}, requires_grad); }

    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

    const T* data() const { return node_->value.data(); }
    const std::vector<T>& values() const { return node_->value; }

    // Leaf mutation only (parameter updates, input staging); never call on a
    // tensor that is already part of a recorded graph.
    T* mutable_data() { return node_->value.data(); }
    std::vector<T>& mutable_values() { return node_->value; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    T item() const {
        if (numel() != 1) {
            throw UsageError("Tensor::item: tensor has " + std::to_string(numel()) + " elements, expected 1");
        }
        return node_->value[0];
    }

    bool defined() const { return !node_->shape.empty() || !node_->value.empty(); }

    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

// Named trainable tensor; names are unique within a model.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
};

template <class T>
class Gradients {
public:
    // Zero-initialized accumulator for a node; created on first touch.
    std::vector<T>& accumulator(const TensorNode<T>* n) {
        auto& buf = table_[n];
        if (buf.empty() && !n->value.empty()) buf.assign(n->value.size(), T(0));
        return buf;
    }

    bool contains(const Tensor<T>& t) const { return table_.count(t.node().get()) != 0; }

    const std::vector<T>& at(const Tensor<T>& t) const {
        auto it = table_.find(t.node().get());
        if (it == table_.end()) {
            throw UsageError("Gradients::at: no gradient recorded for this tensor");
        }
        return it->second;
    }

private:
    std::unordered_map<const TensorNode<T>*, std::vector<T>> table_;
};

// Reverse accumulation from a scalar loss. Visits each node exactly once.
template <class T>
Gradients<T> backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
        throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw UsageError("backward: loss does not require grad (no graph recorded)");
    }

    // Iterative post-order DFS over grad-requiring parents.
    std::vector<const TensorNode<T>*> order;
    std::unordered_map<const TensorNode<T>*, int> mark;  // 1 = on stack, 2 = done
    std::vector<std::pair<const TensorNode<T>*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    mark[loss.node().get()] = 1;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            const TensorNode<T>* p = node->parents[next++].get();
            if (p->requires_grad && mark[p] == 0) {
                mark[p] = 1;
                stack.emplace_back(p, 0);
            }
        } else {
            mark[node] = 2;
            order.push_back(node);
            stack.pop_back();
        }
    }

    Gradients<T> grads;
    grads.accumulator(loss.node().get())[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const TensorNode<T>* n = *it;
        if (!n->backward_fn) continue;
        n->backward_fn(*n, grads.accumulator(n), grads);
    }
    return grads;
}

}  // namespace fsdm
