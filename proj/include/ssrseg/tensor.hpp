#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ssrseg/errors.hpp"

namespace ssrseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct TensorImpl;

// One recorded operation. `seq` is a process-wide increasing counter, so
// inputs always carry a smaller seq than the node that consumes them.
template <typename T>
struct Node {
  std::uint64_t seq = 0;
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Reads the output's grad and accumulates into the inputs' grads.
  std::function<void(const TensorImpl<T>& out)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::shared_ptr<const std::vector<T>> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;

  // Adds `g` into grad, allocating on first use.
  void accumulate(std::span<const T> g);
  std::vector<T>& grad_buffer();
};

std::uint64_t next_node_seq();

}  // namespace detail

// Handle to an immutable N-dimensional array taking part in reverse-mode
// differentiation. Copies share storage; operations always produce new tensors.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  std::span<const T> data() const;
  T item() const;
  T at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  // Gradient buffer; zeros if nothing has been accumulated yet.
  std::vector<T> grad() const;
  void zero_grad();

  // Leaf sharing this tensor's storage but with its own (empty) gradient.
  Tensor detach(bool requires_grad = false) const;

  // Replaces the values of a leaf tensor. Graph nodes are never mutated.
  void set_leaf_data(std::vector<T> values);

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<detail::TensorImpl<T>> impl);

 private:
  void require_defined() const;
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

// Builds the output of a differentiable operation. When no input requires a
// gradient the result is a constant and `backward` is dropped.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(const detail::TensorImpl<T>& out)> backward);

// Reverse-mode sweep from a single-element tensor. Leaf gradients accumulate
// across calls; intermediate gradients are recomputed each call.
template <typename T>
void backward(const Tensor<T>& loss);

// Constant copy with converted element type.
template <typename To, typename From>
Tensor<To> convert(const Tensor<From>& src) {
  std::vector<To> values(src.data().begin(), src.data().end());
  return Tensor<To>(src.shape(), std::move(values));
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace ssrseg
