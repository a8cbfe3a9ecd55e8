#include "muxplm/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "muxplm/errors.hpp"

namespace muxplm::diff {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->data.assign(diff::numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
  if (diff::numel(shape) != data.size()) {
    throw DimensionError("Tensor::from: shape " + shape_str(shape) + " holds " +
                         std::to_string(diff::numel(shape)) + " values, got " + std::to_string(data.size()));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("at(): index rank mismatch");
  std::size_t offset = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape()[axis]) throw DimensionError("at(): index out of range");
    offset = offset * shape()[axis] + i;
    ++axis;
  }
  return node_->data[offset];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), node_->data, false);
}

namespace {
template <typename T>
thread_local Tape<T>* current_tape = nullptr;
}  // namespace

template <typename T>
Tape<T>* active_tape() {
  return current_tape<T>;
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(current_tape<T>) {
  current_tape<T> = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  current_tape<T> = previous_;
}

template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape) {
  if (!loss.defined() || loss.numel() != 1 || !loss.shape().empty()) {
    throw DimensionError("backward: loss must be a scalar, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  Node<T>* root = loss.node();
  if (root->leaf) {
    if (root->requires_grad) root->grad_buffer()[0] += T(1);
    return;
  }
  const auto& entries = tape.entries();
  auto it = std::find_if(entries.rbegin(), entries.rend(),
                         [root](const auto& node) { return node.get() == root; });
  if (it == entries.rend()) throw Error("backward: loss was not recorded on this tape");

  for (const auto& node : entries) node->grad.clear();
  root->grad_buffer()[0] = T(1);
  for (; it != entries.rend(); ++it) {
    Node<T>& node = **it;
    if (!node.grad.empty() && node.backward) node.backward(node);
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template Tape<float>* active_tape<float>();
template Tape<double>* active_tape<double>();
template void backward<float>(const Tensor<float>&, Tape<float>&);
template void backward<double>(const Tensor<double>&, Tape<double>&);

}  // namespace muxplm::diff
