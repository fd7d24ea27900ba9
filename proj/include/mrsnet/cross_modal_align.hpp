#pragma once

#include <cstdint>
#include <optional>

#include "mrsnet/nn.hpp"

namespace mrsnet {

/// Encoded expression tokens: features (B, l_in, N_l) and a constant
/// validity mask (B, N_l) with 1 for real tokens and 0 for padding.
struct LanguageSequence {
  Tensor features;
  Tensor mask;

  std::int64_t batch() const { return features.dim(0); }
  std::int64_t embed_dim() const { return features.dim(1); }
  std::int64_t tokens() const { return features.dim(2); }
  void validate() const;
};

struct CmaConfig {
  std::int64_t dim = 0;       // visual channels
  std::int64_t lang_dim = 0;  // l_in
  std::optional<std::int64_t> key_dim;  // d_k; unset means dim
  int heads = 1;

  // Throws ConfigError for a non-positive d_k.
  std::int64_t resolved_key_dim() const;
};

struct GatedLanguage {
  Tensor gated;  // (B, l_in, N_l), zero at padding
  Tensor gate;   // G_lang, (B, 1, N_l)
};

struct CrossAttention {
  Tensor attention;  // S, (B, heads, N_v, N_l)
  Tensor attended;   // V_L, (B, dim, N_v)
};

struct ModalFusion {
  Tensor output;   // F_cm before reshaping, (B, dim, N_v)
  Tensor gate;     // W_proj, (B, dim, N_v)
  Tensor blended;  // W_proj * V_proj + (1 - W_proj) * V_L
};

/// Language-gated cross-attention from visual queries to linguistic
/// keys/values with a pixel-wise convex fusion gate.
class CrossModalAlign : public Module {
 public:
  CrossModalAlign(const CmaConfig& config, Rng& rng);

  // V_proj = GELU(Conv1D(X_flat)), (B, dim, H*W).
  Tensor project_visual(const Tensor& x2d) const;
  GatedLanguage gate_language(const LanguageSequence& language) const;
  CrossAttention cross_attend(const Tensor& visual, const GatedLanguage& language, const Tensor& mask) const;
  ModalFusion fuse(const Tensor& visual, const Tensor& attended) const;

  // F_cm reshaped to (B, dim, H, W).
  Tensor forward(const Tensor& x2d, const LanguageSequence& language) const;

  const CmaConfig& config() const { return config_; }

  Pointwise visual_proj;
  Pointwise language_gate;
  Pointwise query;
  Pointwise key;
  Pointwise value;
  Pointwise attended_proj;
  Pointwise fusion_gate;
  Pointwise output_proj;

 private:
  CmaConfig config_;
};

}  // namespace mrsnet
