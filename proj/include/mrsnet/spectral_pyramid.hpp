#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "mrsnet/nn.hpp"

namespace mrsnet {

/// Frequency-domain magnitude and phase of a feature map, both (B, C, H, W).
struct SpectralPair {
  Tensor magnitude;
  Tensor phase;  // in [-pi, pi]
};

// Throws NumericError on non-finite input.
SpectralPair fft_decompose(const Tensor& x2d);
// Real part of IFFT2(M * exp(iP)); inverse of fft_decompose for real input.
Tensor spectral_reconstruct(const SpectralPair& spectrum);

struct PsrConfig {
  std::int64_t dim = 0;
  std::vector<int> pyramid_factors{1, 2, 4};

  void validate() const;
};

/// One spatial-spectral refinement block:
///   X_s = Conv(X)
///   W_f = Softmax_channel(Conv([M, P])),  X_f = W_f * X
///   out = Conv([X_s, X_f])
/// All convolutions are 3x3, stride 1, padding 1.
class SpatialSpectralRefine : public Module {
 public:
  SpatialSpectralRefine(std::int64_t dim, Rng& rng);

  struct Detail {
    Tensor output;
    Tensor spatial;    // X_s
    Tensor weights;    // W_f, channel softmax
    Tensor frequency;  // X_f
  };
  Detail forward_detail(const Tensor& x) const;
  Tensor forward(const Tensor& x) const { return forward_detail(x).output; }

  std::int64_t dim() const { return dim_; }

  Conv2d spatial_conv;
  Conv2d weight_conv;
  Conv2d fuse_conv;

 private:
  std::int64_t dim_;
};

/// Pyramidal spatial-spectral refinement producing F_py: average-pool by each
/// factor, refine (unshared parameters per level), bilinear upsample back,
/// concatenate and project |factors|*dim -> dim with a 1x1 convolution.
class PyramidalSpectralRefinement : public Module {
 public:
  PyramidalSpectralRefinement(const PsrConfig& config, Rng& rng);

  Tensor forward(const Tensor& x) const;
  // Per-level outputs after upsampling, before projection.
  std::vector<Tensor> level_outputs(const Tensor& x) const;

  const PsrConfig& config() const { return config_; }
  std::vector<std::unique_ptr<SpatialSpectralRefine>> levels;
  Pointwise projection;

 private:
  void check_input(const Tensor& x) const;
  PsrConfig config_;
};

}  // namespace mrsnet
