#include <sstream>

#include "sdclip/tensor.hpp"

namespace sdclip {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "×";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
template <typename T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}
}  // namespace

template <typename T>
Tape<T>::~Tape() {
  if (active_tape<T>() == this) active_tape<T>() = nullptr;
}

template <typename T>
Tape<T>::Scope::Scope(Tape& tape) : previous_(active_tape<T>()) {
  active_tape<T>() = &tape;
}

template <typename T>
Tape<T>::Scope::~Scope() {
  active_tape<T>() = previous_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_tape<T>();
}

template <typename T>
void Tape<T>::record(std::shared_ptr<TensorNode<T>> out, BackwardFn fn) {
  out->on_tape = true;
  entries_.push_back({std::move(out), std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  TensorNode<T>* root = loss.node();
  if (!root->requires_grad) {
    throw ContractError("backward() on a loss that is not on the tape");
  }
  for (auto& entry : entries_) entry.out->grad.clear();
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    TensorNode<T>& out = *it->out;
    if (out.grad.empty()) continue;  // not reachable from the loss
    it->fn(out);
  }
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(active_tape<T>()) {
  active_tape<T>() = nullptr;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  active_tape<T>() = previous_;
}

template class Tape<float>;
template class Tape<double>;
template class NoGradScope<float>;
template class NoGradScope<double>;

}  // namespace sdclip
