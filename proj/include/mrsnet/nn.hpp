#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mrsnet/ops.hpp"
#include "mrsnet/tensor.hpp"

namespace mrsnet {

/// Seeded generator with platform-independent real conversions
/// (std::*_distribution output is implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::uint64_t next() { return engine_(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  std::mt19937_64 engine_;
};

Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng);
Tensor normal_tensor(Shape shape, double stddev, Rng& rng);

/// Base for layers holding named parameters and buffers.
///
/// Modules register pointers to their own members, so they are neither
/// copyable nor movable; own them by value inside a parent or through
/// std::unique_ptr.
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_buffers() const;
  std::vector<Tensor> parameters() const;
  std::int64_t parameter_count() const;

  void set_training(bool on);
  bool training() const { return training_; }
  void zero_grad();

 protected:
  Tensor& register_parameter(const std::string& name, Tensor& slot, Tensor value);
  void register_buffer(const std::string& name, Tensor& slot, Tensor value);
  void register_module(const std::string& name, Module& child);

 private:
  void collect(const std::string& prefix, bool buffers, std::vector<std::pair<std::string, Tensor>>& out) const;

  std::vector<std::pair<std::string, Tensor*>> params_;
  std::vector<std::pair<std::string, Tensor*>> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
  bool training_ = true;
};

struct Conv2dSpec {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  int groups = 1;
  bool bias = true;
};

class Conv2d : public Module {
 public:
  Conv2d(const Conv2dSpec& spec, Rng& rng);
  Tensor forward(const Tensor& x) const;
  const Conv2dSpec& spec() const { return spec_; }
  Tensor weight, bias;

 private:
  Conv2dSpec spec_;
};

/// Kernel-1 convolution over the channel axis of (B, C, ...) inputs; serves
/// as Conv1D(k=1), 1x1 Conv2d and a per-token linear layer.
class Pointwise : public Module {
 public:
  Pointwise(std::int64_t in_channels, std::int64_t out_channels, Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) const;
  std::int64_t in_channels() const { return weight.dim(1); }
  std::int64_t out_channels() const { return weight.dim(0); }
  Tensor weight, bias;
};

class BatchNorm2d : public Module {
 public:
  explicit BatchNorm2d(std::int64_t channels, double momentum = 0.1, double eps = 1e-5);
  Tensor forward(const Tensor& x);
  Tensor gamma, beta;
  ops::BatchNormState state;
};

// Overwrite helpers for tests and identity-style configurations.
void fill(Tensor& t, double value);
void set_identity(Pointwise& layer);

}  // namespace mrsnet
