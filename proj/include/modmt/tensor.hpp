// SPDX-License-Identifier: Apache-2.0
//
// Shaped-array core with reverse-mode automatic differentiation.
//
// Tensor<T> is a shared handle over a flat row-major buffer (copying a
// Tensor aliases the same storage, like the usual autograd frameworks).
// Operations in ops.hpp append backward closures to an explicit Tape;
// Tape::backward replays them once, in reverse recording order. T is
// float in production; double exists for the tight gradient-check mode.

#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "modmt/common.hpp"

namespace modmt {

template <class T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    const void* tape_tag = nullptr;  // tape that recorded the producing op
};

template <class T>
class Tensor {
public:
    Tensor() : impl_(std::make_shared<TensorImpl<T>>()) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static Tensor filled(Shape shape, T value, bool requires_grad = false) {
        Tensor t;
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(shape_numel(t.impl_->shape), value);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            throw ContractError("tensor data size " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(data);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape[i]; }
    std::size_t numel() const { return impl_->data.size(); }

    T* data() { return impl_->data.data(); }
    const T* data() const { return impl_->data.data(); }
    std::vector<T>& values() { return impl_->data; }
    const std::vector<T>& values() const { return impl_->data; }

    T operator[](std::size_t i) const { return impl_->data[i]; }
    T& operator[](std::size_t i) { return impl_->data[i]; }

    T value() const {
        if (numel() != 1) throw ContractError("value() on non-scalar tensor " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }

    bool has_grad() const { return !impl_->grad.empty(); }

    // Grad buffer, allocated zero-filled on first use. Same shape as data.
    std::vector<T>& grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
        return impl_->grad;
    }

    const std::vector<T>& grad() const { return impl_->grad; }

    void zero_grad() {
        if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    }

    void drop_grad() { impl_->grad.clear(); }

    // Adds into the grad buffer iff this tensor requires a gradient.
    void accumulate_grad(const T* g, std::size_t n) {
        if (!impl_->requires_grad) return;
        auto& gr = grad();
        for (std::size_t i = 0; i < n; ++i) gr[i] += g[i];
    }

    Tensor clone() const {
        Tensor t;
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    TensorImpl<T>* impl() { return impl_.get(); }
    const TensorImpl<T>* impl() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl<T>>& impl_ptr() const { return impl_; }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

// Recording tape. Ops append one node each, inputs always precede their
// consumers, and backward() visits every node exactly once in reverse.
template <class T>
class Tape {
public:
    struct no_record_t {};
    static constexpr no_record_t no_record{};

    Tape() = default;
    explicit Tape(no_record_t) : recording_(false) {}

    bool recording() const { return recording_; }

    void record(const char* op_name, Tensor<T>& output, std::function<void()> backward_fn) {
        if (!recording_) return;
        output.impl()->tape_tag = this;
        nodes_.push_back(Node{op_name, std::move(backward_fn)});
    }

    std::size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and replays recorded ops newest-first.
    // Forward buffers are never written, only grad buffers.
    void backward(Tensor<T>& loss) {
        if (loss.numel() != 1) {
            throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
        }
        if (loss.impl()->tape_tag != this) {
            throw ContractError("backward: loss was not produced by this tape");
        }
        loss.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            it->backward_fn();
        }
    }

private:
    struct Node {
        const char* op_name;
        std::function<void()> backward_fn;
    };
    std::vector<Node> nodes_;
    bool recording_ = true;
};

template <class T>
void backward(Tensor<T>& loss, Tape<T>& tape) {
    tape.backward(loss);
}

// A named, optionally trainable tensor. trainable == false guarantees the
// gradient is never accumulated (requires_grad is kept in sync) and the
// optimizer skips the parameter entirely.
template <class T>
struct Parameter {
    Tensor<T> tensor;
    std::string name;
    bool trainable = true;

    Parameter() = default;
    Parameter(Tensor<T> t, std::string n) : tensor(std::move(t)), name(std::move(n)) {
        tensor.set_requires_grad(true);
    }

    void set_trainable(bool on) {
        trainable = on;
        tensor.set_requires_grad(on);
        if (!on) tensor.drop_grad();
    }
};

using Tensorf = Tensor<float>;
using Tapef = Tape<float>;
using ParamPtr = std::shared_ptr<Parameter<float>>;

}  // namespace modmt
