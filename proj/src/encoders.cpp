#include "mrsnet/encoders.hpp"

#include <cctype>
#include <cmath>
#include <string>

#include "mrsnet/errors.hpp"

namespace mrsnet {

std::vector<Tensor> VisionEncoder::forward(const Tensor& image) const {
  std::vector<Tensor> stages;
  Tensor x = image;
  for (int s = 0; s < static_cast<int>(stage_dims().size()); ++s) {
    x = stage_forward(s, x);
    stages.push_back(x);
  }
  return stages;
}

ToyVisionEncoder::ToyVisionEncoder(std::vector<std::int64_t> dims, Rng& rng) : dims_(std::move(dims)) {
  if (dims_.size() != 4) throw ConfigError("vision encoder needs exactly 4 stage dims");
  for (int s = 0; s < 4; ++s) {
    const std::int64_t in = s == 0 ? 3 : dims_[s - 1];
    const int k = s == 0 ? 4 : 2;
    stages_.push_back(std::make_unique<Conv2d>(Conv2dSpec{in, dims_[s], k, k, 0, 1, true}, rng));
    register_module("stages." + std::to_string(s), *stages_.back());
  }
}

Tensor ToyVisionEncoder::stage_forward(int stage, const Tensor& input) const {
  if (stage < 0 || stage >= 4) throw ConfigError("stage index " + std::to_string(stage) + " out of range");
  return ops::gelu(stages_[stage]->forward(input));
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) tokens.push_back(std::move(word));
    word.clear();
  };
  for (std::size_t i = 0; i < text.size();) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (c < 0x80) {
      if (std::isalnum(c)) word.push_back(static_cast<char>(std::tolower(c)));
      else flush();
      ++i;
      continue;
    }
    flush();
    std::size_t len = (c >= 0xF0) ? 4 : (c >= 0xE0) ? 3 : (c >= 0xC0) ? 2 : 1;
    len = std::min(len, text.size() - i);
    tokens.push_back(text.substr(i, len));
    i += len;
  }
  flush();
  return tokens;
}

HashingTextEncoder::HashingTextEncoder(std::int64_t embed_dim, std::int64_t max_tokens)
    : embed_dim_(embed_dim), max_tokens_(max_tokens) {
  if (embed_dim <= 0 || max_tokens <= 0) throw ConfigError("text encoder needs positive embed_dim and max_tokens");
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

LanguageSequence HashingTextEncoder::encode(const std::vector<std::string>& texts) const {
  const auto batch = static_cast<std::int64_t>(texts.size());
  if (batch == 0) throw ValidationError("no expressions to encode");
  Tensor features({batch, embed_dim_, max_tokens_});
  Tensor mask({batch, max_tokens_});
  auto f = features.data_mut();
  auto m = mask.data_mut();
  const double unit = std::sqrt(3.0);  // uniform(-sqrt3, sqrt3) has unit variance
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto tokens = tokenize(texts[b]);
    if (tokens.empty()) throw ValidationError("expression \"" + texts[b] + "\" has no tokens");
    const auto n = std::min<std::int64_t>(static_cast<std::int64_t>(tokens.size()), max_tokens_);
    for (std::int64_t t = 0; t < n; ++t) {
      std::uint64_t state = fnv1a(tokens[t]);
      m[b * max_tokens_ + t] = 1.0;
      for (std::int64_t d = 0; d < embed_dim_; ++d) {
        const double u = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
        const double freq = std::pow(10000.0, -static_cast<double>(d / 2 * 2) / static_cast<double>(embed_dim_));
        const double pos = (d % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq);
        f[(b * embed_dim_ + d) * max_tokens_ + t] = unit * (2.0 * u - 1.0) + 0.1 * pos;
      }
    }
  }
  return {features, mask};
}

}  // namespace mrsnet
