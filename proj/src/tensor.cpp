#include "ssrseg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

namespace ssrseg {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

std::uint64_t next_node_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed) + 1;
}

template <typename T>
std::vector<T>& TensorImpl<T>::grad_buffer() {
  if (grad.empty()) grad.assign(data->size(), T(0));
  return grad;
}

template <typename T>
void TensorImpl<T>::accumulate(std::span<const T> g) {
  auto& buf = grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

template struct TensorImpl<float>;
template struct TensorImpl<double>;

}  // namespace detail

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ContractError("tensor shape " + shape_str(shape) + " holds " +
                        std::to_string(shape_numel(shape)) + " values, got " +
                        std::to_string(values.size()));
  }
  for (auto e : shape) {
    if (e == 0) throw ContractError("tensor extents must be positive: " + shape_str(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl<T>>();
  impl_->shape = std::move(shape);
  impl_->data = std::make_shared<const std::vector<T>>(std::move(values));
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  return Tensor(shape, std::vector<T>(shape_numel(shape), value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_impl(std::shared_ptr<detail::TensorImpl<T>> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

template <typename T>
void Tensor<T>::require_defined() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  require_defined();
  return impl_->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ContractError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  require_defined();
  return impl_->data->size();
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  require_defined();
  return {impl_->data->data(), impl_->data->size()};
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return (*impl_->data)[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  require_defined();
  return impl_->requires_grad;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  require_defined();
  return impl_->node == nullptr;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  require_defined();
  return !impl_->grad.empty();
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  require_defined();
  if (impl_->grad.empty()) return std::vector<T>(numel(), T(0));
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  require_defined();
  impl_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach(bool requires_grad) const {
  require_defined();
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = requires_grad;
  return from_impl(std::move(impl));
}

template <typename T>
void Tensor<T>::set_leaf_data(std::vector<T> values) {
  require_defined();
  if (impl_->node) throw ContractError("set_leaf_data on a non-leaf tensor");
  if (values.size() != numel()) {
    throw ContractError("set_leaf_data size mismatch for shape " + shape_str(shape()));
  }
  impl_->data = std::make_shared<const std::vector<T>>(std::move(values));
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(const detail::TensorImpl<T>& out)> backward) {
  Tensor<T> out(std::move(shape), std::move(values));
  const bool needs_grad = std::any_of(inputs.begin(), inputs.end(),
                                      [](const Tensor<T>& t) { return t.requires_grad(); });
  if (!needs_grad) return out;
  auto node = std::make_shared<detail::Node<T>>();
  node->seq = detail::next_node_seq();
  node->op = op;
  node->inputs.reserve(inputs.size());
  for (auto& in : inputs) node->inputs.push_back(in.impl());
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a single-element loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() on a loss that does not belong to a graph");
  }

  using Impl = detail::TensorImpl<T>;
  std::vector<Impl*> order;
  std::unordered_set<Impl*> seen;
  std::vector<Impl*> stack{loss.impl().get()};
  while (!stack.empty()) {
    Impl* cur = stack.back();
    stack.pop_back();
    if (!seen.insert(cur).second) continue;
    if (!cur->node) continue;
    order.push_back(cur);
    for (auto& in : cur->node->inputs) {
      if (in->requires_grad) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Impl* a, const Impl* b) { return a->node->seq > b->node->seq; });

  for (Impl* impl : order) impl->grad.clear();
  auto* root = loss.impl().get();
  if (root->node) {
    root->grad.assign(1, T(1));
  } else {
    root->accumulate(std::vector<T>{T(1)});
  }
  for (Impl* impl : order) {
    if (impl->grad.empty()) continue;
    impl->node->backward(*impl);
  }
  // Intermediate buffers are not needed once the sweep is done.
  for (Impl* impl : order) {
    impl->grad.clear();
    impl->grad.shrink_to_fit();
  }
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result(const char*, Shape, std::vector<float>, std::vector<Tensor<float>>,
                                   std::function<void(const detail::TensorImpl<float>&)>);
template Tensor<double> make_result(const char*, Shape, std::vector<double>,
                                    std::vector<Tensor<double>>,
                                    std::function<void(const detail::TensorImpl<double>&)>);
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace ssrseg
