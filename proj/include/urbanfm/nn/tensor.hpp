#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "urbanfm/errors.hpp"

namespace urbanfm::nn {

// When false, ops do not record backward closures (inference mode).
inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
    ~NoGradGuard() { g_grad_enabled = prev; }
};

template <typename T>
struct Node {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated on first use
    bool requires_grad = false;
    std::function<void()> backward;
    std::vector<std::shared_ptr<Node<T>>> parents;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

// Shared handle to an n-d array participating in reverse-mode differentiation.
// Shapes are (batch, channels, height, width), (batch, features) or flat.
template <typename T>
class Tensor {
public:
    Tensor() : node_(nullptr) {}
    explicit Tensor(std::vector<int> shape, T fill = T(0), bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        node_->shape = std::move(shape);
        node_->data.assign(numel(node_->shape), fill);
        node_->requires_grad = requires_grad;
    }
    static Tensor from_data(std::vector<int> shape, std::vector<T> data,
                            bool requires_grad = false) {
        Tensor t;
        t.node_ = std::make_shared<Node<T>>();
        if (data.size() != numel(shape)) throw ShapeError("Tensor: data length mismatch");
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    size_t size() const { return node_->data.size(); }

    std::vector<T>& data() { return node_->data; }
    const std::vector<T>& data() const { return node_->data; }
    std::vector<T>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<T>& grad() const { return node_->grad; }
    bool has_grad() const { return node_->grad.size() == node_->data.size(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }
    void zero_grad() {
        node_->ensure_grad();
        std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    std::shared_ptr<Node<T>> node() const { return node_; }

    // Same storage, different shape.
    Tensor reshape(std::vector<int> new_shape) const {
        if (numel(new_shape) != size()) throw ShapeError("reshape: element count mismatch");
        Tensor out;
        out.node_ = std::make_shared<Node<T>>();
        out.node_->shape = std::move(new_shape);
        out.node_->data = node_->data;
        out.node_->requires_grad = node_->requires_grad && g_grad_enabled;
        if (out.node_->requires_grad) {
            auto src = node_;
            // Raw pointer: the lambda is owned by the output node, so capturing
            // its own shared_ptr would create a reference cycle and leak the
            // whole graph (ops.hpp captures follow the same rule).
            auto dst = out.node_.get();
            out.node_->parents = {node_};
            out.node_->backward = [src, dst]() {
                src->ensure_grad();
                for (size_t i = 0; i < src->grad.size(); ++i) src->grad[i] += dst->grad[i];
            };
        }
        return out;
    }

    // Reverse-mode accumulation from this scalar.
    void backward() {
        if (size() != 1) throw ShapeError("backward: root must be a scalar");
        std::vector<std::shared_ptr<Node<T>>> order;
        std::unordered_set<Node<T>*> seen;
        topo(node_, seen, order);
        node_->ensure_grad();
        node_->grad[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it)
            if ((*it)->backward) (*it)->backward();
    }

    static size_t numel(const std::vector<int>& shape) {
        size_t n = 1;
        for (int d : shape) n *= static_cast<size_t>(d);
        return n;
    }

private:
    static void topo(const std::shared_ptr<Node<T>>& n, std::unordered_set<Node<T>*>& seen,
                     std::vector<std::shared_ptr<Node<T>>>& order) {
        if (!n || seen.count(n.get())) return;
        seen.insert(n.get());
        for (auto& p : n->parents) topo(p, seen, order);
        order.push_back(n);
    }

    std::shared_ptr<Node<T>> node_;
};

// A named trainable tensor.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace urbanfm::nn
