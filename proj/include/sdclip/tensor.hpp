#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sdclip/errors.hpp"

namespace sdclip {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  // Empty until something accumulates into it; leaves that require grad
  // have it materialized (zero-filled) at construction.
  std::vector<T> grad;
  bool requires_grad = false;
  // Set on nodes produced by a recorded operation.
  bool on_tape = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

/// Handle to a dense row-major array. Copies share storage; use clone() for
/// an independent copy.
///
/// Matrices are 2-D; a 1-D tensor of length n behaves as a 1×n row and a
/// 0-D tensor is a scalar.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> data(shape_numel(shape), T(0));
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<T> data,
                     bool requires_grad = false) {
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad)
      : node_(std::make_shared<TensorNode<T>>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->ensure_grad();
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const {
    return ndim() == 2 ? node_->shape[0] : 1;
  }
  std::size_t cols() const {
    return ndim() == 0 ? 1 : node_->shape.back();
  }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const T* ptr() const { return node_->data.data(); }

  T item() const {
    if (size() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->data.size(), T(0));
  }
  // Drops the accumulator entirely (teacher parameters never hold one).
  void set_requires_grad(bool value) {
    node_->requires_grad = value;
    if (value) {
      node_->ensure_grad();
    } else {
      node_->grad.clear();
      node_->grad.shrink_to_fit();
    }
  }

  // Deep copy with fresh (zeroed) gradient state.
  Tensor clone(bool requires_grad) const {
    return Tensor(node_->shape, node_->data, requires_grad);
  }

  TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Ordered record of executed operations. Entries are appended in execution
/// order, which is a topological order of the graph; backward() walks them in
/// reverse so each node is visited exactly once.
///
/// Operations record onto the tape activated on the current thread (see
/// Tape::Scope). With no active tape every operation runs in no-grad mode.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(TensorNode<T>& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active();

  void record(std::shared_ptr<TensorNode<T>> out, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and propagates into every requires-grad
  /// leaf. Leaf gradients accumulate across calls; intermediate gradients are
  /// reset at the start of each call.
  void backward(const Tensor<T>& loss);

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::shared_ptr<TensorNode<T>> out;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

/// RAII no-grad region: suspends the active tape.
template <typename T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

extern template class Tape<float>;
extern template class Tape<double>;
extern template class NoGradScope<float>;
extern template class NoGradScope<double>;

}  // namespace sdclip
