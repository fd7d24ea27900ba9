#include "mrsnet/nn.hpp"

#include <cmath>
#include <numbers>

#include "mrsnet/errors.hpp"

namespace mrsnet {

double Rng::normal() {
  // Box-Muller; 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) return 0;
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t v;
  do v = engine_();
  while (v >= limit);
  return v % n;
}

Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data_mut()) v = rng.uniform(lo, hi);
  return t;
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data_mut()) v = stddev * rng.normal();
  return t;
}

std::vector<std::pair<std::string, Tensor>> Module::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  collect("", false, out);
  return out;
}

std::vector<std::pair<std::string, Tensor>> Module::named_buffers() const {
  std::vector<std::pair<std::string, Tensor>> out;
  collect("", true, out);
  return out;
}

std::vector<Tensor> Module::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::int64_t Module::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

void Module::collect(const std::string& prefix, bool buffers,
                     std::vector<std::pair<std::string, Tensor>>& out) const {
  for (const auto& [name, slot] : buffers ? buffers_ : params_) out.emplace_back(prefix + name, *slot);
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", buffers, out);
}

void Module::set_training(bool on) {
  training_ = on;
  for (auto& [name, child] : children_) child->set_training(on);
}

void Module::zero_grad() {
  for (auto& t : parameters()) t.zero_grad();
}

Tensor& Module::register_parameter(const std::string& name, Tensor& slot, Tensor value) {
  slot = std::move(value);
  slot.set_requires_grad(true);
  params_.emplace_back(name, &slot);
  return slot;
}

void Module::register_buffer(const std::string& name, Tensor& slot, Tensor value) {
  slot = std::move(value);
  buffers_.emplace_back(name, &slot);
}

void Module::register_module(const std::string& name, Module& child) { children_.emplace_back(name, &child); }

Conv2d::Conv2d(const Conv2dSpec& spec, Rng& rng) : spec_(spec) {
  if (spec.in_channels <= 0 || spec.out_channels <= 0 || spec.groups < 1 || spec.in_channels % spec.groups ||
      spec.out_channels % spec.groups)
    throw ConfigError("conv2d: invalid channel/group configuration");
  const std::int64_t cin_g = spec.in_channels / spec.groups;
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin_g * spec.kernel * spec.kernel));
  register_parameter("weight", weight,
                     uniform_tensor({spec.out_channels, cin_g, spec.kernel, spec.kernel}, -bound, bound, rng));
  if (spec.bias) register_parameter("bias", bias, uniform_tensor({spec.out_channels}, -bound, bound, rng));
}

Tensor Conv2d::forward(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != spec_.in_channels)
    throw ConfigError("conv2d expects " + std::to_string(spec_.in_channels) + " input channels, got " +
                      shape_str(x.shape()));
  return ops::conv2d(x, weight, bias, {spec_.stride, spec_.padding, spec_.groups});
}

Pointwise::Pointwise(std::int64_t in_channels, std::int64_t out_channels, Rng& rng, bool with_bias) {
  if (in_channels <= 0 || out_channels <= 0) throw ConfigError("pointwise layer needs positive channel counts");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels));
  register_parameter("weight", weight, uniform_tensor({out_channels, in_channels}, -bound, bound, rng));
  if (with_bias) register_parameter("bias", bias, uniform_tensor({out_channels}, -bound, bound, rng));
}

Tensor Pointwise::forward(const Tensor& x) const {
  if (x.rank() < 2 || x.dim(1) != in_channels())
    throw ConfigError("pointwise layer expects " + std::to_string(in_channels()) + " input channels, got " +
                      shape_str(x.shape()));
  return ops::pointwise(x, weight, bias);
}

BatchNorm2d::BatchNorm2d(std::int64_t channels, double momentum, double eps) {
  register_parameter("gamma", gamma, Tensor::ones({channels}));
  register_parameter("beta", beta, Tensor::zeros({channels}));
  register_buffer("running_mean", state.running_mean, Tensor::zeros({channels}));
  register_buffer("running_var", state.running_var, Tensor::ones({channels}));
  state.momentum = momentum;
  state.eps = eps;
}

Tensor BatchNorm2d::forward(const Tensor& x) { return ops::batch_norm2d(x, gamma, beta, state, training()); }

void fill(Tensor& t, double value) {
  for (auto& v : t.data_mut()) v = value;
}

void set_identity(Pointwise& layer) {
  if (layer.in_channels() != layer.out_channels()) throw ConfigError("identity requires a square layer");
  fill(layer.weight, 0.0);
  const auto n = layer.in_channels();
  auto w = layer.weight.data_mut();
  for (std::int64_t i = 0; i < n; ++i) w[i * n + i] = 1.0;
  if (layer.bias.defined()) fill(layer.bias, 0.0);
}

}  // namespace mrsnet
