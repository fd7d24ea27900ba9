#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mrsnet/cross_modal_align.hpp"
#include "mrsnet/nn.hpp"
#include "mrsnet/spatial_relations.hpp"
#include "mrsnet/spectral_pyramid.hpp"

namespace mrsnet {

struct IfimConfig {
  std::int64_t dim = 0;
  std::int64_t lang_dim = 0;
  std::vector<int> pyramid_factors{1, 2, 4};
  int cma_heads = 1;
  bool use_psr = true;
  bool use_csr = true;
};

struct IfimStageOutput {
  Tensor refined;                // (B, dim, H, W)
  std::array<Tensor, 3> gates;   // w1, w2, w3, each (B, dim, H, W) in (0, 1)
  Tensor pre_linear;             // w1*F_py + w2*F_rel + w3*F_cm
};

/// Gated fusion of the three branch maps: concat -> linear -> sigmoid ->
/// split into independent gates -> weighted sum -> linear.
class AdaptiveFeatureFusion : public Module {
 public:
  AdaptiveFeatureFusion(std::int64_t dim, Rng& rng);
  IfimStageOutput forward(const Tensor& pyramid, const Tensor& relationship, const Tensor& cross_modal) const;

  Pointwise gate;
  Pointwise output;

 private:
  std::int64_t dim_;
};

/// Intra-scale feature interaction for one encoder stage. A disabled branch
/// (use_psr / use_csr false) contributes the unmodified stage feature and its
/// parameters take no part in the forward graph.
class IntraScaleInteraction : public Module {
 public:
  IntraScaleInteraction(const IfimConfig& config, Rng& rng);

  IfimStageOutput forward(const Tensor& stage, const LanguageSequence& language) const;

  const IfimConfig& config() const { return config_; }
  void set_ablation(bool use_psr, bool use_csr);

  PyramidalSpectralRefinement psr;
  SpatialRelationModule csr;
  CrossModalAlign cma;
  AdaptiveFeatureFusion fusion;

 private:
  IfimConfig config_;
};

}  // namespace mrsnet
