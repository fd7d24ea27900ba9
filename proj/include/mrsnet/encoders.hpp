#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mrsnet/cross_modal_align.hpp"
#include "mrsnet/nn.hpp"

namespace mrsnet {

/// Visual backbone seen as four stages. stage_forward(s, x) maps the input
/// of stage s (the image for s == 0, otherwise the previous stage's feature)
/// to a (B, stage_dims[s], H/stride_s, W/stride_s) map.
class VisionEncoder : public Module {
 public:
  virtual const std::vector<std::int64_t>& stage_dims() const = 0;
  virtual const std::vector<int>& stage_strides() const = 0;
  virtual Tensor stage_forward(int stage, const Tensor& input) const = 0;

  // Plain encoder pass without any per-stage refinement.
  std::vector<Tensor> forward(const Tensor& image) const;
};

/// Linguistic backbone: a batch of expressions -> LanguageSequence.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::int64_t embed_dim() const = 0;
  virtual std::int64_t max_tokens() const = 0;
  virtual LanguageSequence encode(const std::vector<std::string>& texts) const = 0;
};

/// Strided-convolution stand-in for a hierarchical transformer backbone:
/// a 4x4/stride-4 patch embedding then 2x2/stride-2 merges, each with GELU.
class ToyVisionEncoder : public VisionEncoder {
 public:
  ToyVisionEncoder(std::vector<std::int64_t> dims, Rng& rng);

  const std::vector<std::int64_t>& stage_dims() const override { return dims_; }
  const std::vector<int>& stage_strides() const override { return strides_; }
  Tensor stage_forward(int stage, const Tensor& input) const override;

 private:
  std::vector<std::int64_t> dims_;
  std::vector<int> strides_{4, 8, 16, 32};
  std::vector<std::unique_ptr<Conv2d>> stages_;
};

// Lower-cased ASCII words; every non-ASCII code point (e.g. CJK) is its own token.
std::vector<std::string> tokenize(const std::string& text);

/// Deterministic, parameter-free text embedder: each token maps to a fixed
/// pseudo-random vector seeded by its hash, plus a sinusoidal position term.
class HashingTextEncoder : public TextEncoder {
 public:
  HashingTextEncoder(std::int64_t embed_dim, std::int64_t max_tokens);

  std::int64_t embed_dim() const override { return embed_dim_; }
  std::int64_t max_tokens() const override { return max_tokens_; }
  LanguageSequence encode(const std::vector<std::string>& texts) const override;

 private:
  std::int64_t embed_dim_;
  std::int64_t max_tokens_;
};

}  // namespace mrsnet
