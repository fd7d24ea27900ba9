#pragma once

#include <cstdint>
#include <vector>

#include "mrsnet/nn.hpp"

namespace mrsnet {

// (B, C, H, W) -> (B, C*f*f, H/f, W/f) and back; exact permutations.
// Channel c*f*f + i*f + j of the output holds input pixel (y*f + i, x*f + j).
Tensor space_to_depth(const Tensor& x, int factor);
Tensor depth_to_space(const Tensor& x, int factor);

struct StageLedgerEntry {
  int stage = 0;
  std::int64_t channels = 0;
  std::int64_t packed_channels = 0;
  int factor = 1;
};

/// Stage features packed to the coarsest resolution and concatenated.
struct UnifiedFeature {
  Tensor fused;
  std::vector<StageLedgerEntry> ledger;
};

// Throws unless there are >= 2 stages whose sizes are power-of-two multiples of the coarsest.
UnifiedFeature pack_stages(const std::vector<Tensor>& stages);
std::vector<Tensor> unpack_stages(const Tensor& unified, const std::vector<StageLedgerEntry>& ledger);

struct HfimConfig {
  std::vector<std::int64_t> stage_channels;
  std::vector<int> stage_factors;  // spatial ratio of each stage to the coarsest
  int heads = 4;

  // Stages at successive 2x strides, finest first.
  static HfimConfig pyramid(std::vector<std::int64_t> channels, int heads = 4);
  std::int64_t packed_channels() const;
  void validate() const;
};

/// Depthwise 3x3 -> pointwise 1x1 -> batch norm -> ReLU.
class LocalBranch : public Module {
 public:
  LocalBranch(std::int64_t channels, Rng& rng);
  Tensor forward(const Tensor& x);

  Conv2d depthwise;
  Pointwise pointwise;
  BatchNorm2d norm;
};

/// Multi-head self-attention over the H*W spatial tokens.
class SpatialAttentionBranch : public Module {
 public:
  SpatialAttentionBranch(std::int64_t channels, int heads, Rng& rng);

  struct Detail {
    Tensor output;
    Tensor weights;  // (B, heads, N, N)
  };
  Detail forward_detail(const Tensor& x) const;
  Tensor forward(const Tensor& x) const { return forward_detail(x).output; }

  Pointwise query, key, value, output;

 private:
  int heads_;
};

/// Self-attention over spectral tokens: each frequency bin is a token whose
/// features are the concatenated real and imaginary parts (2C). The attended
/// features are projected back to (real, imag), inverse transformed and the
/// real part is kept.
class FrequencyAttentionBranch : public Module {
 public:
  FrequencyAttentionBranch(std::int64_t channels, int heads, Rng& rng);

  struct Detail {
    Tensor output;
    Tensor weights;      // (B, heads, N, N)
    double max_abs_imag = 0.0;  // discarded imaginary part after the inverse FFT
  };
  Detail forward_detail(const Tensor& x) const;
  Tensor forward(const Tensor& x) const { return forward_detail(x).output; }

  Pointwise query, key, value, output;

 private:
  std::int64_t channels_;
  int heads_;
};

/// Hierarchical feature integration across encoder stages.
class HierarchicalIntegration : public Module {
 public:
  HierarchicalIntegration(const HfimConfig& config, Rng& rng);

  std::vector<Tensor> forward(const std::vector<Tensor>& stages);
  const HfimConfig& config() const { return config_; }

  LocalBranch local;
  SpatialAttentionBranch spatial;
  FrequencyAttentionBranch frequency;
  Pointwise fuse;  // 3*C_packed -> C_packed

 private:
  HfimConfig config_;
};

}  // namespace mrsnet
