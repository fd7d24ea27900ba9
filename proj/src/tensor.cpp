#include "mrsnet/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "mrsnet/errors.hpp"

namespace mrsnet {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace detail {

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

void TensorImpl::accumulate(std::span<const double> g) {
  auto& buf = grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
}

namespace {
Tensor finish(Shape shape, std::vector<double> data, std::vector<std::shared_ptr<TensorImpl>> parents,
              BackwardFn fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (!parents.empty()) {
    impl->requires_grad = true;
    impl->parents = std::move(parents);
    impl->backward = std::move(fn);
  }
  return Tensor(std::move(impl));
}
}  // namespace

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                   BackwardFn fn) {
  if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
    throw ShapeError("op produced " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
  std::vector<std::shared_ptr<TensorImpl>> parents;
  if (g_grad_enabled) {
    for (const Tensor* t : inputs)
      if (t && t->defined() && t->requires_grad()) parents.push_back(t->impl());
  }
  return finish(std::move(shape), std::move(data), std::move(parents), std::move(fn));
}

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs, BackwardFn fn) {
  if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
    throw ShapeError("op produced " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
  std::vector<std::shared_ptr<TensorImpl>> parents;
  if (g_grad_enabled) {
    for (const Tensor& t : inputs)
      if (t.defined() && t.requires_grad()) parents.push_back(t.impl());
  }
  return finish(std::move(shape), std::move(data), std::move(parents), std::move(fn));
}

}  // namespace detail

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<detail::TensorImpl>()) {
  impl_->data.assign(static_cast<std::size_t>(numel_of(shape)), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
  if (static_cast<std::int64_t>(values.size()) != numel_of(shape))
    throw ShapeError(std::to_string(values.size()) + " values do not fill shape " + shape_str(shape));
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return impl_->shape[static_cast<std::size_t>(a)];
}

int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }
std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl_->data.size()); }
std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::data_mut() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  if (static_cast<int>(index.size()) != rank()) throw ShapeError("index rank mismatch for " + shape_str(shape()));
  std::int64_t flat = 0;
  std::size_t a = 0;
  for (auto i : index) {
    const auto d = impl_->shape[a++];
    if (i < 0 || i >= d) throw ShapeError("index out of range for " + shape_str(shape()));
    flat = flat * d + i;
  }
  return impl_->data[static_cast<std::size_t>(flat)];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (impl_->backward) throw Error("autograd", "set_requires_grad on a non-leaf tensor");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }
void Tensor::zero_grad() { impl_->grad.clear(); }

void Tensor::backward() const {
  if (numel() != 1) throw Error("autograd", "backward() requires a scalar, got " + shape_str(shape()));
  if (!requires_grad()) throw Error("autograd", "backward() on a tensor that does not require grad");

  // Iterative post-order DFS; reversed order is a valid topological order.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::TensorImpl* p = node->parents[next++].get();
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  impl_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  // Free the graph; leaves keep their accumulated gradients.
  for (detail::TensorImpl* node : order) {
    if (node->backward) {
      node->backward = nullptr;
      node->parents.clear();
      node->grad.clear();
      node->grad.shrink_to_fit();
      node->requires_grad = false;
    }
  }
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return detach(); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace mrsnet
