#include "mrsnet/network.hpp"

#include <cmath>
#include <string>

#include "mrsnet/errors.hpp"

namespace mrsnet {

void NetworkConfig::validate() const {
  if (stage_dims.size() != 4) throw ConfigError("stage_dims must list 4 stages");
  for (auto d : stage_dims)
    if (d <= 0) throw ConfigError("stage dims must be positive");
  if (!hfim_dims.empty() && hfim_dims.size() != 4) throw ConfigError("hfim_dims must be empty or list 4 stages");
  for (auto d : hfim_dims)
    if (d <= 0) throw ConfigError("hfim dims must be positive");
  if (text_dim <= 0 || max_tokens <= 0) throw ConfigError("text_dim and max_tokens must be positive");
  if (cma_heads < 1 || hfim_heads < 1) throw ConfigError("head counts must be >= 1");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  PsrConfig{stage_dims[0], pyramid_factors}.validate();
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"stage_dims", c.stage_dims},
                     {"hfim_dims", c.hfim_dims},
                     {"text_dim", c.text_dim},
                     {"max_tokens", c.max_tokens},
                     {"pyramid_factors", c.pyramid_factors},
                     {"cma_heads", c.cma_heads},
                     {"hfim_heads", c.hfim_heads},
                     {"use_psr", c.use_psr},
                     {"use_csr", c.use_csr},
                     {"threshold", c.threshold},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  NetworkConfig d;
  c.stage_dims = j.value("stage_dims", d.stage_dims);
  c.hfim_dims = j.value("hfim_dims", d.hfim_dims);
  c.text_dim = j.value("text_dim", d.text_dim);
  c.max_tokens = j.value("max_tokens", d.max_tokens);
  c.pyramid_factors = j.value("pyramid_factors", d.pyramid_factors);
  c.cma_heads = j.value("cma_heads", d.cma_heads);
  c.hfim_heads = j.value("hfim_heads", d.hfim_heads);
  c.use_psr = j.value("use_psr", d.use_psr);
  c.use_csr = j.value("use_csr", d.use_csr);
  c.threshold = j.value("threshold", d.threshold);
  c.seed = j.value("seed", d.seed);
}

Tensor SegmentationOutput::probability() const { return ops::sigmoid(logits); }

Tensor SegmentationOutput::predicted_mask(double threshold) const {
  Tensor out(logits.shape());
  auto dst = out.data_mut();
  const auto src = logits.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-src[i]));
    dst[i] = p > threshold ? 1.0 : 0.0;
  }
  return out;
}

std::optional<std::string> ForwardTrace::first_non_finite() const {
  for (const auto& [name, t] : tensors)
    for (double v : t.data())
      if (!std::isfinite(v)) return name;
  return std::nullopt;
}

Decoder::Decoder(const std::vector<std::int64_t>& dims, Rng& rng) : head(dims.front(), 1, rng) {
  const int n = static_cast<int>(dims.size());
  levels.resize(n);
  for (int s = n - 1; s >= 0; --s) {
    const std::int64_t in = s == n - 1 ? dims[s] : dims[s + 1] + dims[s];
    levels[s] = std::make_unique<Conv2d>(Conv2dSpec{in, dims[s], 3, 1, 1, 1, true}, rng);
  }
  for (int s = 0; s < n; ++s) register_module("levels." + std::to_string(s), *levels[s]);
  register_module("head", head);
}

Tensor Decoder::forward(const std::vector<Tensor>& skips, std::int64_t out_h, std::int64_t out_w) const {
  const int n = static_cast<int>(levels.size());
  if (static_cast<int>(skips.size()) != n) throw ShapeError("decoder expects one skip per stage");
  Tensor x = ops::relu(levels[n - 1]->forward(skips[n - 1]));
  for (int s = n - 2; s >= 0; --s) {
    x = ops::upsample_bilinear(x, skips[s].dim(2), skips[s].dim(3));
    x = ops::relu(levels[s]->forward(ops::concat({x, skips[s]}, 1)));
  }
  x = ops::upsample_bilinear(x, out_h, out_w);
  return head.forward(x);
}

MrsNet::MrsNet(const NetworkConfig& config)
    : MrsNet(config, nullptr, std::make_shared<HashingTextEncoder>(config.text_dim, config.max_tokens)) {}

MrsNet::MrsNet(const NetworkConfig& config, std::unique_ptr<VisionEncoder> vision,
               std::shared_ptr<const TextEncoder> text)
    : config_(config), vision_(std::move(vision)), text_(std::move(text)) {
  config_.validate();
  Rng rng(config_.seed);
  if (!vision_) vision_ = std::make_unique<ToyVisionEncoder>(config_.stage_dims, rng);
  if (vision_->stage_dims() != config_.stage_dims)
    throw ConfigError("vision encoder stage dims do not match the network configuration");
  if (!text_ || text_->embed_dim() != config_.text_dim)
    throw ConfigError("text encoder embedding width does not match text_dim");
  register_module("encoder", *vision_);

  for (int s = 0; s < 4; ++s) {
    IfimConfig ic{config_.stage_dims[s], config_.text_dim, config_.pyramid_factors, config_.cma_heads,
                  config_.use_psr, config_.use_csr};
    ifim.push_back(std::make_unique<IntraScaleInteraction>(ic, rng));
    register_module("ifim." + std::to_string(s), *ifim.back());
  }
  if (!config_.hfim_dims.empty()) {
    for (int s = 0; s < 4; ++s) {
      necks.push_back(std::make_unique<Pointwise>(config_.stage_dims[s], config_.hfim_dims[s], rng));
      register_module("neck." + std::to_string(s), *necks.back());
    }
  }
  hfim = std::make_unique<HierarchicalIntegration>(HfimConfig::pyramid(config_.decoder_dims(), config_.hfim_heads),
                                                   rng);
  register_module("hfim", *hfim);
  decoder = std::make_unique<Decoder>(config_.decoder_dims(), rng);
  register_module("decoder", *decoder);
}

void MrsNet::check_image(const Tensor& image) const {
  if (image.rank() != 4 || image.dim(1) != 3)
    throw ShapeError("image must be (B, 3, H, W), got " + shape_str(image.shape()));
  const auto h = image.dim(2), w = image.dim(3);
  const std::int64_t multiple = 32 * config_.pyramid_factors.back();
  if (h % 32 || w % 32 || (h / 32) % config_.pyramid_factors.back() || (w / 32) % config_.pyramid_factors.back())
    throw ShapeError("image size " + std::to_string(h) + "x" + std::to_string(w) + " must be a multiple of " +
                     std::to_string(multiple));
}

void MrsNet::set_ablation(bool use_psr, bool use_csr) {
  config_.use_psr = use_psr;
  config_.use_csr = use_csr;
  for (auto& block : ifim) block->set_ablation(use_psr, use_csr);
}

void MrsNet::zero_head() {
  fill(decoder->head.weight, 0.0);
  fill(decoder->head.bias, 0.0);
}

std::vector<Tensor> MrsNet::refined_stages(const Tensor& image, const LanguageSequence& language,
                                           ForwardTrace* trace) const {
  check_image(image);
  if (language.batch() != image.dim(0))
    throw ShapeError("image batch " + std::to_string(image.dim(0)) + " vs " + std::to_string(language.batch()) +
                     " expressions");
  std::vector<Tensor> refined;
  Tensor x = image;
  for (int s = 0; s < 4; ++s) {
    const auto feature = vision_->stage_forward(s, x);
    if (trace) trace->record("encoder.stage" + std::to_string(s), feature);
    x = ifim[s]->forward(feature, language).refined;
    if (trace) trace->record("ifim." + std::to_string(s), x);
    refined.push_back(x);
  }
  return refined;
}

SegmentationOutput MrsNet::forward(const Tensor& image, const std::vector<std::string>& expressions,
                                   ForwardTrace* trace) {
  if (static_cast<std::int64_t>(expressions.size()) != image.dim(0))
    throw ShapeError("one expression per image required");
  return forward(image, text_->encode(expressions), trace);
}

SegmentationOutput MrsNet::forward(const Tensor& image, const LanguageSequence& language, ForwardTrace* trace) {
  if (trace) {
    trace->record("image", image);
    trace->record("language", language.features);
  }
  auto stages = refined_stages(image, language, trace);
  if (!necks.empty())
    for (int s = 0; s < 4; ++s) stages[s] = necks[s]->forward(stages[s]);
  auto integrated = hfim->forward(stages);
  if (trace)
    for (int s = 0; s < 4; ++s) trace->record("hfim." + std::to_string(s), integrated[s]);
  SegmentationOutput out{decoder->forward(integrated, image.dim(2), image.dim(3))};
  if (trace) trace->record("logits", out.logits);
  return out;
}

Tensor segmentation_loss(const SegmentationOutput& output, const Tensor& gt_mask, bool with_dice) {
  auto loss = ops::bce_with_logits(output.logits, gt_mask);
  if (with_dice) loss = ops::add(loss, ops::soft_dice_loss(output.logits, gt_mask));
  return loss;
}

}  // namespace mrsnet
