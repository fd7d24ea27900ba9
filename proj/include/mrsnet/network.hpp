#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mrsnet/encoders.hpp"
#include "mrsnet/hfim.hpp"
#include "mrsnet/ifim.hpp"
#include "mrsnet/nn.hpp"

namespace mrsnet {

struct NetworkConfig {
  std::vector<std::int64_t> stage_dims{96, 192, 384, 768};
  // Per-stage 1x1 lateral widths feeding the hierarchical integration and the
  // decoder; empty feeds the stage features directly.
  std::vector<std::int64_t> hfim_dims{8, 16, 32, 64};
  std::int64_t text_dim = 768;
  std::int64_t max_tokens = 20;
  std::vector<int> pyramid_factors{1, 2, 4};
  int cma_heads = 1;
  int hfim_heads = 4;
  bool use_psr = true;
  bool use_csr = true;
  double threshold = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  std::vector<std::int64_t> decoder_dims() const { return hfim_dims.empty() ? stage_dims : hfim_dims; }
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

struct SegmentationOutput {
  Tensor logits;  // (B, 1, H, W)

  Tensor probability() const;
  Tensor predicted_mask(double threshold = 0.5) const;
};

/// Named intermediates recorded during a forward pass, for diagnosing
/// non-finite values.
struct ForwardTrace {
  std::vector<std::pair<std::string, Tensor>> tensors;

  void record(std::string name, const Tensor& t) { tensors.emplace_back(std::move(name), t); }
  std::optional<std::string> first_non_finite() const;
};

/// Top-down decoder: starting at the coarsest map, each level upsamples 2x,
/// concatenates the next finer skip and applies 3x3 conv + ReLU; the finest
/// map is resized to the input resolution and a 1x1 conv emits one logit.
class Decoder : public Module {
 public:
  Decoder(const std::vector<std::int64_t>& dims, Rng& rng);
  Tensor forward(const std::vector<Tensor>& skips, std::int64_t out_h, std::int64_t out_w) const;

  std::vector<std::unique_ptr<Conv2d>> levels;  // levels[s] produces dims[s] channels
  Pointwise head;
};

class MrsNet : public Module {
 public:
  // Toy vision and hashing text encoders.
  explicit MrsNet(const NetworkConfig& config);
  MrsNet(const NetworkConfig& config, std::unique_ptr<VisionEncoder> vision,
         std::shared_ptr<const TextEncoder> text);

  SegmentationOutput forward(const Tensor& image, const std::vector<std::string>& expressions,
                             ForwardTrace* trace = nullptr);
  SegmentationOutput forward(const Tensor& image, const LanguageSequence& language, ForwardTrace* trace = nullptr);

  // IFIM-refined stage outputs, finest first.
  std::vector<Tensor> refined_stages(const Tensor& image, const LanguageSequence& language,
                                     ForwardTrace* trace = nullptr) const;

  void set_ablation(bool use_psr, bool use_csr);
  // Zero the output head so every logit is 0.
  void zero_head();

  const NetworkConfig& config() const { return config_; }
  const VisionEncoder& vision_encoder() const { return *vision_; }
  const TextEncoder& text_encoder() const { return *text_; }

  std::vector<std::unique_ptr<IntraScaleInteraction>> ifim;
  std::vector<std::unique_ptr<Pointwise>> necks;
  std::unique_ptr<HierarchicalIntegration> hfim;
  std::unique_ptr<Decoder> decoder;

 private:
  void check_image(const Tensor& image) const;

  NetworkConfig config_;
  std::unique_ptr<VisionEncoder> vision_;
  std::shared_ptr<const TextEncoder> text_;
};

// Mean pixelwise BCE (plus soft dice when requested); gt is binary, shaped like the logits.
Tensor segmentation_loss(const SegmentationOutput& output, const Tensor& gt_mask, bool with_dice = false);

}  // namespace mrsnet
