#include "mrsnet/cross_modal_align.hpp"

#include <string>

#include "mrsnet/attention.hpp"
#include "mrsnet/errors.hpp"

namespace mrsnet {

void LanguageSequence::validate() const {
  if (!features.defined() || features.rank() != 3)
    throw ShapeError("language features must be (B, l_in, N_l)");
  if (!mask.defined() || mask.shape() != Shape{features.dim(0), features.dim(2)})
    throw ShapeError("language mask " + (mask.defined() ? shape_str(mask.shape()) : std::string("<none>")) +
                     " does not match features " + shape_str(features.shape()));
  const auto n = features.dim(2);
  const auto m = mask.data();
  for (std::int64_t b = 0; b < features.dim(0); ++b) {
    bool any = false;
    for (std::int64_t j = 0; j < n; ++j) {
      const double v = m[b * n + j];
      if (v != 0.0 && v != 1.0) throw ValidationError("language mask values must be 0 or 1");
      any = any || v == 1.0;
    }
    if (!any) throw ValidationError("expression " + std::to_string(b) + " has no valid tokens");
  }
}

std::int64_t CmaConfig::resolved_key_dim() const {
  const auto d = key_dim.value_or(dim);
  if (d <= 0) throw ConfigError("cross-modal key dim d_k must be positive, got " + std::to_string(d));
  return d;
}

CrossModalAlign::CrossModalAlign(const CmaConfig& config, Rng& rng)
    : visual_proj(config.dim, config.dim, rng),
      language_gate(config.lang_dim, 1, rng),
      query(config.dim, config.resolved_key_dim(), rng),
      // A key bias shifts every logit in a row equally, so it never affects the output.
      key(config.lang_dim, config.resolved_key_dim(), rng, false),
      value(config.lang_dim, config.resolved_key_dim(), rng),
      attended_proj(config.resolved_key_dim(), config.dim, rng),
      fusion_gate(2 * config.dim, config.dim, rng),
      output_proj(config.dim, config.dim, rng),
      config_(config) {
  if (config.heads < 1 || config.resolved_key_dim() % config.heads)
    throw ConfigError("cross-modal key dim " + std::to_string(config.resolved_key_dim()) +
                      " not divisible by heads " + std::to_string(config.heads));
  register_module("visual_proj", visual_proj);
  register_module("language_gate", language_gate);
  register_module("query", query);
  register_module("key", key);
  register_module("value", value);
  register_module("attended_proj", attended_proj);
  register_module("fusion_gate", fusion_gate);
  register_module("output_proj", output_proj);
}

Tensor CrossModalAlign::project_visual(const Tensor& x2d) const {
  if (x2d.rank() != 4 || x2d.dim(1) != config_.dim)
    throw ConfigError("cross-modal align configured for " + std::to_string(config_.dim) + " channels, got " +
                      shape_str(x2d.shape()));
  auto flat = ops::reshape(x2d, {x2d.dim(0), config_.dim, x2d.dim(2) * x2d.dim(3)});
  return ops::gelu(visual_proj.forward(flat));
}

GatedLanguage CrossModalAlign::gate_language(const LanguageSequence& language) const {
  language.validate();
  if (language.embed_dim() != config_.lang_dim)
    throw ConfigError("cross-modal align expects " + std::to_string(config_.lang_dim) + "-d language features, got " +
                      shape_str(language.features.shape()));
  GatedLanguage out;
  out.gate = ops::sigmoid(language_gate.forward(language.features));
  const auto valid = ops::reshape(language.mask, {language.batch(), 1, language.tokens()});
  out.gated = ops::mul(ops::mul(language.features, out.gate), valid);
  return out;
}

CrossAttention CrossModalAlign::cross_attend(const Tensor& visual, const GatedLanguage& language,
                                             const Tensor& mask) const {
  const auto q = ops::permute(query.forward(visual), {0, 2, 1});
  const auto k = ops::permute(key.forward(language.gated), {0, 2, 1});
  const auto v = ops::permute(value.forward(language.gated), {0, 2, 1});
  auto att = multihead_attention(q, k, v, config_.heads, mask);
  CrossAttention out;
  out.attention = att.weights;
  out.attended = attended_proj.forward(ops::permute(att.output, {0, 2, 1}));
  return out;
}

ModalFusion CrossModalAlign::fuse(const Tensor& visual, const Tensor& attended) const {
  if (visual.shape() != attended.shape())
    throw ShapeError("fusion operands differ: " + shape_str(visual.shape()) + " vs " + shape_str(attended.shape()));
  ModalFusion out;
  out.gate = ops::sigmoid(fusion_gate.forward(ops::concat({visual, attended}, 1)));
  out.blended = ops::add(ops::mul(out.gate, visual), ops::mul(ops::one_minus(out.gate), attended));
  out.output = output_proj.forward(out.blended);
  return out;
}

Tensor CrossModalAlign::forward(const Tensor& x2d, const LanguageSequence& language) const {
  const auto visual = project_visual(x2d);
  if (language.batch() != x2d.dim(0))
    throw ShapeError("visual batch " + std::to_string(x2d.dim(0)) + " vs language batch " +
                     std::to_string(language.batch()));
  const auto gated = gate_language(language);
  const auto attended = cross_attend(visual, gated, language.mask);
  const auto fused = fuse(visual, attended.attended);
  return ops::reshape(fused.output, x2d.shape());
}

}  // namespace mrsnet
