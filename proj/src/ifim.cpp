#include "mrsnet/ifim.hpp"

#include <string>

#include "mrsnet/errors.hpp"

namespace mrsnet {

AdaptiveFeatureFusion::AdaptiveFeatureFusion(std::int64_t dim, Rng& rng)
    : gate(3 * dim, 3 * dim, rng), output(dim, dim, rng), dim_(dim) {
  register_module("gate", gate);
  register_module("output", output);
}

IfimStageOutput AdaptiveFeatureFusion::forward(const Tensor& pyramid, const Tensor& relationship,
                                               const Tensor& cross_modal) const {
  if (pyramid.shape() != relationship.shape() || pyramid.shape() != cross_modal.shape())
    throw ShapeError("adaptive fusion inputs differ: " + shape_str(pyramid.shape()) + ", " +
                     shape_str(relationship.shape()) + ", " + shape_str(cross_modal.shape()));
  if (pyramid.rank() != 4 || pyramid.dim(1) != dim_)
    throw ConfigError("adaptive fusion configured for " + std::to_string(dim_) + " channels, got " +
                      shape_str(pyramid.shape()));
  auto weights = ops::sigmoid(gate.forward(ops::concat({pyramid, relationship, cross_modal}, 1)));
  auto parts = ops::split(weights, 1, {dim_, dim_, dim_});
  IfimStageOutput out;
  out.gates = {parts[0], parts[1], parts[2]};
  out.pre_linear = ops::add(ops::add(ops::mul(parts[0], pyramid), ops::mul(parts[1], relationship)),
                            ops::mul(parts[2], cross_modal));
  out.refined = output.forward(out.pre_linear);
  return out;
}

IntraScaleInteraction::IntraScaleInteraction(const IfimConfig& config, Rng& rng)
    : psr(PsrConfig{config.dim, config.pyramid_factors}, rng),
      csr(config.dim, rng),
      cma(CmaConfig{config.dim, config.lang_dim, std::nullopt, config.cma_heads}, rng),
      fusion(config.dim, rng),
      config_(config) {
  register_module("psr", psr);
  register_module("csr", csr);
  register_module("cma", cma);
  register_module("fusion", fusion);
}

void IntraScaleInteraction::set_ablation(bool use_psr, bool use_csr) {
  config_.use_psr = use_psr;
  config_.use_csr = use_csr;
}

IfimStageOutput IntraScaleInteraction::forward(const Tensor& stage, const LanguageSequence& language) const {
  const Tensor pyramid = config_.use_psr ? psr.forward(stage) : stage;
  const Tensor relationship = config_.use_csr ? csr.forward(stage) : stage;
  const Tensor cross_modal = cma.forward(stage, language);
  return fusion.forward(pyramid, relationship, cross_modal);
}

}  // namespace mrsnet
