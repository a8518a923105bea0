// Dense tensors and the differentiation tape they are recorded on.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace saml {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Raised when a forward or backward evaluation yields NaN or Inf.
class NumericError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <typename T>
class Tape;

/**
 * Value-semantic dense array in row-major order.
 *
 * Storage is immutable and shared between copies, so copying a tensor is cheap
 * and never aliases a later mutation. A tensor may additionally refer to a node
 * of a Tape, in which case operations on it are recorded for differentiation.
 * The tape must outlive every tensor that refers to it.
 */
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>, "Tensor requires a floating-point scalar");

public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<const std::vector<T>>(std::move(values))) {
        if (saml::numel(shape_) != data_->size()) {
            throw ShapeError("tensor of shape " + to_string(shape_) + " given " +
                             std::to_string(data_->size()) + " values");
        }
    }

    static Tensor full(Shape shape, T value) {
        const std::size_t n = saml::numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value));
    }
    static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
    static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

    bool defined() const noexcept { return data_ != nullptr; }
    const Shape& shape() const noexcept { return shape_; }
    std::size_t dim() const noexcept { return shape_.size(); }
    std::size_t size(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const noexcept { return data_ ? data_->size() : 0; }

    std::span<const T> values() const noexcept {
        return data_ ? std::span<const T>(*data_) : std::span<const T>();
    }
    const T* data() const noexcept { return data_ ? data_->data() : nullptr; }
    T operator[](std::size_t i) const { return (*data_)[i]; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
        return (*data_)[0];
    }

    bool tracked() const noexcept { return tape_ != nullptr; }
    Tape<T>* tape() const noexcept { return tape_; }
    int node() const noexcept { return node_; }

    /// Same values, detached from any tape.
    Tensor detach() const {
        Tensor t = *this;
        t.tape_ = nullptr;
        t.node_ = -1;
        return t;
    }

    /// Untracked copy with its own storage.
    Tensor clone() const {
        return data_ ? Tensor(shape_, *data_) : Tensor();
    }

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_->begin(), data_->end()));
    }

    bool same_values(const Tensor& other) const {
        return shape_ == other.shape_ && values().size() == other.values().size() &&
               std::equal(values().begin(), values().end(), other.values().begin());
    }

private:
    friend class Tape<T>;

    Shape shape_;
    std::shared_ptr<const std::vector<T>> data_;
    Tape<T>* tape_ = nullptr;
    int node_ = -1;
};

namespace detail {
inline thread_local bool grad_mode = true;
}  // namespace detail

inline bool grad_enabled() noexcept { return detail::grad_mode; }

/// Scoped switch for recording on tapes. Gradient passes without create_graph run disabled.
class GradModeGuard {
public:
    explicit GradModeGuard(bool enabled) : previous_(detail::grad_mode) { detail::grad_mode = enabled; }
    ~GradModeGuard() { detail::grad_mode = previous_; }
    GradModeGuard(const GradModeGuard&) = delete;
    GradModeGuard& operator=(const GradModeGuard&) = delete;

private:
    bool previous_;
};

/**
 * Append-only record of differentiable operations.
 *
 * Node indices follow creation order, so every node's inputs precede it. A
 * gradient pass with create_graph appends its own backward operations to the
 * same tape, which is what makes gradients of gradients available.
 */
template <typename T>
class Tape {
public:
    using Grads = std::vector<Tensor<T>>;
    /// Maps the gradient of a node's output to gradients of its inputs. Inputs
    /// whose flag in `needs` is false may be left undefined.
    using BackwardFn = std::function<Grads(const Tensor<T>& grad, const std::vector<bool>& needs)>;

    struct Node {
        const char* op = "";
        std::vector<int> inputs;  // -1 for untracked inputs
        BackwardFn backward;      // empty for leaves
        Shape shape;
        bool leaf() const noexcept { return !backward; }
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Registers `x` as a leaf and returns a tracked alias of it.
    Tensor<T> watch(const Tensor<T>& x) {
        Tensor<T> out = x.detach();
        nodes_.push_back(Node{"leaf", {}, {}, x.shape()});
        out.tape_ = this;
        out.node_ = static_cast<int>(nodes_.size()) - 1;
        return out;
    }

    std::vector<Tensor<T>> watch(const std::vector<Tensor<T>>& xs) {
        std::vector<Tensor<T>> out;
        out.reserve(xs.size());
        for (const auto& x : xs) out.push_back(watch(x));
        return out;
    }

    Tensor<T> record(Tensor<T> out, std::vector<int> inputs, const char* op, BackwardFn fn) {
        nodes_.push_back(Node{op, std::move(inputs), std::move(fn), out.shape()});
        out.tape_ = this;
        out.node_ = static_cast<int>(nodes_.size()) - 1;
        return out;
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    // deque keeps references stable while backward passes append nodes
    const Node& node(int i) const { return nodes_.at(static_cast<std::size_t>(i)); }

private:
    std::deque<Node> nodes_;
};

}  // namespace saml
