#include "mrsnet/hfim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mrsnet/attention.hpp"
#include "mrsnet/errors.hpp"
#include "mrsnet/fft.hpp"

namespace mrsnet {

Tensor space_to_depth(const Tensor& x, int factor) {
  if (x.rank() != 4) throw ShapeError("space_to_depth expects (B, C, H, W), got " + shape_str(x.shape()));
  if (factor < 1) throw ConfigError("space_to_depth factor must be >= 1");
  if (factor == 1) return x;
  const auto b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % factor || w % factor)
    throw ShapeError("space_to_depth: " + shape_str(x.shape()) + " not divisible by " + std::to_string(factor));
  const std::int64_t f = factor;
  auto t = ops::reshape(x, {b, c, h / f, f, w / f, f});
  t = ops::permute(t, {0, 1, 3, 5, 2, 4});
  return ops::reshape(t, {b, c * f * f, h / f, w / f});
}

Tensor depth_to_space(const Tensor& x, int factor) {
  if (x.rank() != 4) throw ShapeError("depth_to_space expects (B, C, H, W), got " + shape_str(x.shape()));
  if (factor < 1) throw ConfigError("depth_to_space factor must be >= 1");
  if (factor == 1) return x;
  const std::int64_t f = factor;
  const auto b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c % (f * f))
    throw ShapeError("depth_to_space: " + std::to_string(c) + " channels not divisible by " + std::to_string(f * f));
  auto t = ops::reshape(x, {b, c / (f * f), f, f, h, w});
  t = ops::permute(t, {0, 1, 4, 2, 5, 3});
  return ops::reshape(t, {b, c / (f * f), h * f, w * f});
}

namespace {
bool is_power_of_two(std::int64_t v) { return v > 0 && (v & (v - 1)) == 0; }
}  // namespace

UnifiedFeature pack_stages(const std::vector<Tensor>& stages) {
  if (stages.size() < 2) throw ShapeError("hierarchical integration needs at least 2 stages");
  for (const auto& s : stages)
    if (s.rank() != 4 || s.dim(0) != stages[0].dim(0))
      throw ShapeError("stage features must be (B, C, H, W) with a common batch");
  std::int64_t h_min = stages[0].dim(2), w_min = stages[0].dim(3);
  for (const auto& s : stages) {
    h_min = std::min(h_min, s.dim(2));
    w_min = std::min(w_min, s.dim(3));
  }
  UnifiedFeature u;
  std::vector<Tensor> packed;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    if (s.dim(2) % h_min || s.dim(3) % w_min || s.dim(2) / h_min != s.dim(3) / w_min ||
        !is_power_of_two(s.dim(2) / h_min))
      throw ShapeError("stage " + std::to_string(i) + " size " + shape_str(s.shape()) +
                       " is not a power-of-two multiple of the coarsest " + std::to_string(h_min) + "x" +
                       std::to_string(w_min));
    const int f = static_cast<int>(s.dim(2) / h_min);
    u.ledger.push_back({static_cast<int>(i), s.dim(1), s.dim(1) * f * f, f});
    packed.push_back(space_to_depth(s, f));
  }
  u.fused = ops::concat(packed, 1);
  return u;
}

std::vector<Tensor> unpack_stages(const Tensor& unified, const std::vector<StageLedgerEntry>& ledger) {
  std::vector<std::int64_t> widths;
  for (const auto& e : ledger) widths.push_back(e.packed_channels);
  auto parts = ops::split(unified, 1, widths);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < ledger.size(); ++i) out.push_back(depth_to_space(parts[i], ledger[i].factor));
  return out;
}

HfimConfig HfimConfig::pyramid(std::vector<std::int64_t> channels, int heads) {
  HfimConfig c;
  const int n = static_cast<int>(channels.size());
  for (int i = 0; i < n; ++i) c.stage_factors.push_back(1 << (n - 1 - i));
  c.stage_channels = std::move(channels);
  c.heads = heads;
  return c;
}

std::int64_t HfimConfig::packed_channels() const {
  std::int64_t total = 0;
  for (std::size_t i = 0; i < stage_channels.size(); ++i)
    total += stage_channels[i] * stage_factors[i] * stage_factors[i];
  return total;
}

void HfimConfig::validate() const {
  if (stage_channels.size() < 2) throw ConfigError("hierarchical integration needs at least 2 stages");
  if (stage_factors.size() != stage_channels.size()) throw ConfigError("one spatial factor per stage required");
  for (std::size_t i = 0; i < stage_channels.size(); ++i) {
    if (stage_channels[i] <= 0) throw ConfigError("stage channels must be positive");
    if (!is_power_of_two(stage_factors[i])) throw ConfigError("stage factors must be powers of two");
  }
  const auto c = packed_channels();
  if (heads < 1 || c % heads)
    throw ConfigError("packed width " + std::to_string(c) + " not divisible by " + std::to_string(heads) + " heads");
}

LocalBranch::LocalBranch(std::int64_t channels, Rng& rng)
    : depthwise(Conv2dSpec{channels, channels, 3, 1, 1, static_cast<int>(channels), false}, rng),
      pointwise(channels, channels, rng, false),
      norm(channels) {
  // No conv biases: batch norm removes any per-channel constant ahead of it.
  register_module("depthwise", depthwise);
  register_module("pointwise", pointwise);
  register_module("norm", norm);
}

Tensor LocalBranch::forward(const Tensor& x) {
  return ops::relu(norm.forward(pointwise.forward(depthwise.forward(x))));
}

namespace {
Tensor tokens_of(const Tensor& x) {
  return ops::reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)});
}
}  // namespace

SpatialAttentionBranch::SpatialAttentionBranch(std::int64_t channels, int heads, Rng& rng)
    : query(channels, channels, rng),
      key(channels, channels, rng, false),
      value(channels, channels, rng),
      output(channels, channels, rng),
      heads_(heads) {
  register_module("query", query);
  register_module("key", key);
  register_module("value", value);
  register_module("output", output);
}

SpatialAttentionBranch::Detail SpatialAttentionBranch::forward_detail(const Tensor& x) const {
  if (x.rank() != 4) throw ShapeError("spatial attention expects (B, C, H, W), got " + shape_str(x.shape()));
  const auto tokens = tokens_of(x);
  auto att = multihead_attention(ops::permute(query.forward(tokens), {0, 2, 1}),
                                 ops::permute(key.forward(tokens), {0, 2, 1}),
                                 ops::permute(value.forward(tokens), {0, 2, 1}), heads_);
  Detail d;
  d.weights = att.weights;
  d.output = ops::reshape(output.forward(ops::permute(att.output, {0, 2, 1})), x.shape());
  return d;
}

FrequencyAttentionBranch::FrequencyAttentionBranch(std::int64_t channels, int heads, Rng& rng)
    : query(2 * channels, 2 * channels, rng),
      key(2 * channels, 2 * channels, rng, false),
      value(2 * channels, 2 * channels, rng),
      output(2 * channels, 2 * channels, rng),
      channels_(channels),
      heads_(heads) {
  register_module("query", query);
  register_module("key", key);
  register_module("value", value);
  register_module("output", output);
}

FrequencyAttentionBranch::Detail FrequencyAttentionBranch::forward_detail(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != channels_)
    throw ConfigError("frequency attention configured for " + std::to_string(channels_) + " channels, got " +
                      shape_str(x.shape()));
  const auto spectrum = fft2(x);
  const auto tokens = tokens_of(ops::concat({spectrum.real, spectrum.imag}, 1));
  auto att = multihead_attention(ops::permute(query.forward(tokens), {0, 2, 1}),
                                 ops::permute(key.forward(tokens), {0, 2, 1}),
                                 ops::permute(value.forward(tokens), {0, 2, 1}), heads_);
  const auto mixed = output.forward(ops::permute(att.output, {0, 2, 1}));
  const auto parts = ops::split(ops::reshape(mixed, {x.dim(0), 2 * channels_, x.dim(2), x.dim(3)}), 1,
                                {channels_, channels_});
  const auto spatial = ifft2(parts[0], parts[1]);
  Detail d;
  d.weights = att.weights;
  d.output = spatial.real;
  for (double v : spatial.imag.data()) d.max_abs_imag = std::max(d.max_abs_imag, std::abs(v));
  return d;
}

HierarchicalIntegration::HierarchicalIntegration(const HfimConfig& config, Rng& rng)
    : local((config.validate(), config.packed_channels()), rng),
      spatial(config.packed_channels(), config.heads, rng),
      frequency(config.packed_channels(), config.heads, rng),
      fuse(3 * config.packed_channels(), config.packed_channels(), rng),
      config_(config) {
  register_module("local", local);
  register_module("spatial", spatial);
  register_module("frequency", frequency);
  register_module("fuse", fuse);
}

std::vector<Tensor> HierarchicalIntegration::forward(const std::vector<Tensor>& stages) {
  if (stages.size() != config_.stage_channels.size())
    throw ConfigError("hierarchical integration configured for " + std::to_string(config_.stage_channels.size()) +
                      " stages, got " + std::to_string(stages.size()));
  auto unified = pack_stages(stages);
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& e = unified.ledger[i];
    if (e.channels != config_.stage_channels[i] || e.factor != config_.stage_factors[i])
      throw ConfigError("stage " + std::to_string(i) + " has " + std::to_string(e.channels) + " channels at ratio " +
                        std::to_string(e.factor) + ", configured " + std::to_string(config_.stage_channels[i]) +
                        " at ratio " + std::to_string(config_.stage_factors[i]));
  }
  const auto& f = unified.fused;
  auto fused = fuse.forward(ops::concat({local.forward(f), spatial.forward(f), frequency.forward(f)}, 1));
  return unpack_stages(fused, unified.ledger);
}

}  // namespace mrsnet
