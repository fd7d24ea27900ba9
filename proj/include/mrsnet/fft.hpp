#pragma once

#include "mrsnet/tensor.hpp"

namespace mrsnet {

struct ComplexTensor {
  Tensor real;
  Tensor imag;
};

// 2-D DFT over the last two axes, unnormalized forward and 1/(H*W) inverse.
// Both are differentiable; `imag` may be undefined for real input.
ComplexTensor fft2(const Tensor& real, const Tensor& imag = {});
ComplexTensor ifft2(const Tensor& real, const Tensor& imag = {});

// |z| and arg(z) in [-pi, pi]; gradients are taken as zero where |z| == 0.
Tensor complex_abs(const ComplexTensor& z);
Tensor complex_angle(const ComplexTensor& z);

}  // namespace mrsnet
