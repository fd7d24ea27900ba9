#include "mrsnet/spectral_pyramid.hpp"

#include <cmath>
#include <string>

#include "mrsnet/errors.hpp"
#include "mrsnet/fft.hpp"

namespace mrsnet {

SpectralPair fft_decompose(const Tensor& x2d) {
  if (x2d.rank() != 4) throw ShapeError("fft_decompose expects (B, C, H, W), got " + shape_str(x2d.shape()));
  for (double v : x2d.data())
    if (!std::isfinite(v)) throw NumericError("fft_decompose: non-finite value in input " + shape_str(x2d.shape()));
  auto z = fft2(x2d);
  // Self-conjugate bins of a real signal are real; clearing rounding noise
  // (and -0) keeps their phase at exactly 0 or pi instead of flipping sign.
  const auto h = x2d.dim(2), w = x2d.dim(3);
  auto im = z.imag.data_mut();
  for (std::int64_t p = 0; p < x2d.dim(0) * x2d.dim(1); ++p)
    for (std::int64_t k = 0; k < h; ++k)
      for (std::int64_t l = 0; l < w; ++l)
        if ((2 * k) % h == 0 && (2 * l) % w == 0) im[(p * h + k) * w + l] = 0.0;
  return {complex_abs(z), complex_angle(z)};
}

Tensor spectral_reconstruct(const SpectralPair& spectrum) {
  if (spectrum.magnitude.shape() != spectrum.phase.shape()) throw ShapeError("magnitude/phase shape mismatch");
  Tensor re(spectrum.magnitude.shape()), im(spectrum.magnitude.shape());
  const auto m = spectrum.magnitude.data(), p = spectrum.phase.data();
  auto rd = re.data_mut(), id = im.data_mut();
  for (std::size_t i = 0; i < m.size(); ++i) {
    rd[i] = m[i] * std::cos(p[i]);
    id[i] = m[i] * std::sin(p[i]);
  }
  NoGradGuard guard;
  return ifft2(re, im).real;
}

void PsrConfig::validate() const {
  if (dim <= 0) throw ConfigError("PSR dim must be positive");
  if (pyramid_factors.empty() || pyramid_factors.front() != 1)
    throw ConfigError("PSR pyramid factors must start at 1");
  for (std::size_t i = 1; i < pyramid_factors.size(); ++i)
    if (pyramid_factors[i] <= pyramid_factors[i - 1]) throw ConfigError("PSR pyramid factors must strictly increase");
}

namespace {
Conv2dSpec conv3x3(std::int64_t in, std::int64_t out) { return {in, out, 3, 1, 1, 1, true}; }
}  // namespace

SpatialSpectralRefine::SpatialSpectralRefine(std::int64_t dim, Rng& rng)
    : spatial_conv(conv3x3(dim, dim), rng),
      weight_conv(conv3x3(2 * dim, dim), rng),
      fuse_conv(conv3x3(2 * dim, dim), rng),
      dim_(dim) {
  register_module("spatial_conv", spatial_conv);
  register_module("weight_conv", weight_conv);
  register_module("fuse_conv", fuse_conv);
}

SpatialSpectralRefine::Detail SpatialSpectralRefine::forward_detail(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != dim_)
    throw ConfigError("spatial-spectral refine configured for " + std::to_string(dim_) + " channels, got " +
                      shape_str(x.shape()));
  Detail d;
  d.spatial = spatial_conv.forward(x);
  const auto spectrum = fft_decompose(x);
  d.weights = ops::softmax(weight_conv.forward(ops::concat({spectrum.magnitude, spectrum.phase}, 1)), 1);
  d.frequency = ops::mul(d.weights, x);
  d.output = fuse_conv.forward(ops::concat({d.spatial, d.frequency}, 1));
  return d;
}

PyramidalSpectralRefinement::PyramidalSpectralRefinement(const PsrConfig& config, Rng& rng)
    : projection((config.validate(), static_cast<std::int64_t>(config.pyramid_factors.size()) * config.dim),
                 config.dim, rng),
      config_(config) {
  for (std::size_t i = 0; i < config.pyramid_factors.size(); ++i) {
    levels.push_back(std::make_unique<SpatialSpectralRefine>(config.dim, rng));
    register_module("levels." + std::to_string(i), *levels.back());
  }
  register_module("projection", projection);
}

void PyramidalSpectralRefinement::check_input(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != config_.dim)
    throw ConfigError("PSR configured for " + std::to_string(config_.dim) + " channels, got " + shape_str(x.shape()));
  const std::int64_t f = config_.pyramid_factors.back();
  const auto h = x.dim(2), w = x.dim(3);
  if (h % f || w % f) {
    const auto ph = (h + f - 1) / f * f, pw = (w + f - 1) / f * f;
    throw ShapeError("PSR input " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by factor " +
                     std::to_string(f) + "; pad to " + std::to_string(ph) + "x" + std::to_string(pw));
  }
}

std::vector<Tensor> PyramidalSpectralRefinement::level_outputs(const Tensor& x) const {
  check_input(x);
  std::vector<Tensor> outs;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    auto pooled = ops::avg_pool2d(x, config_.pyramid_factors[i]);
    outs.push_back(ops::upsample_bilinear(levels[i]->forward(pooled), x.dim(2), x.dim(3)));
  }
  return outs;
}

Tensor PyramidalSpectralRefinement::forward(const Tensor& x) const {
  return projection.forward(ops::concat(level_outputs(x), 1));
}

}  // namespace mrsnet
