#pragma once

#include <cstdint>
#include <vector>

#include "mrsnet/tensor.hpp"

// Differentiable tensor operations. Layouts are channels-first:
// feature maps (B, C, H, W), token sequences (B, C, N).
namespace mrsnet::ops {

// Elementwise with broadcasting over size-1 axes (operands of equal rank).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor one_minus(const Tensor& a);

Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Σ a ⊙ w for a constant weight tensor; handy as a scalar probe of an output.
Tensor weighted_sum(const Tensor& a, const Tensor& weights);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t length);
std::vector<Tensor> split(const Tensor& a, int axis, const std::vector<std::int64_t>& sizes);

// (B, M, K) x (B, K, N) -> (B, M, N); `b` may also be rank 2 and shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);

// Kernel-1 convolution over the channel axis: x (B, Cin, ...) , weight (Cout, Cin), bias (Cout) or undefined.
Tensor pointwise(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};
// x (B, Cin, H, W), weight (Cout, Cin/groups, kh, kw), bias (Cout) or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opts = {});

Tensor avg_pool2d(const Tensor& x, int factor);
// Half-pixel-centre bilinear resampling (align_corners = false).
Tensor upsample_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

Tensor softmax(const Tensor& x, int axis);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};
// Training mode normalizes with batch statistics and updates running stats
// (unbiased variance); eval mode uses the running statistics.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                    bool training);

// Mean pixelwise binary cross-entropy on logits; `target` is a constant in {0,1}.
Tensor bce_with_logits(const Tensor& logits, const Tensor& target, double clamp = 1e-7);
// 1 - (2 Σ p t + 1) / (Σ p + Σ t + 1), averaged over the batch.
Tensor soft_dice_loss(const Tensor& logits, const Tensor& target);

}  // namespace mrsnet::ops
