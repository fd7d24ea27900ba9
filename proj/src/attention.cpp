#include "mrsnet/attention.hpp"

#include <cmath>
#include <limits>

#include "mrsnet/errors.hpp"
#include "mrsnet/ops.hpp"

namespace mrsnet {

namespace {

// (B, N, D) -> (B*heads, N, D/heads)
Tensor split_heads(const Tensor& x, int heads) {
  const auto b = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (heads == 1) return x;
  auto t = ops::reshape(x, {b, n, heads, d / heads});
  t = ops::permute(t, {0, 2, 1, 3});
  return ops::reshape(t, {b * heads, n, d / heads});
}

Tensor merge_heads(const Tensor& x, std::int64_t batch, int heads) {
  if (heads == 1) return x;
  const auto n = x.dim(1), dh = x.dim(2);
  auto t = ops::reshape(x, {batch, heads, n, dh});
  t = ops::permute(t, {0, 2, 1, 3});
  return ops::reshape(t, {batch, n, heads * dh});
}

}  // namespace

AttentionOutput multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                                    const Tensor& key_mask) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
    throw ShapeError("attention expects rank-3 (B, N, D) operands");
  const auto batch = q.dim(0), nq = q.dim(1), d = q.dim(2), nk = k.dim(1), dv = v.dim(2);
  if (k.dim(0) != batch || v.dim(0) != batch || k.dim(2) != d || v.dim(1) != nk)
    throw ShapeError("attention operand mismatch: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                     ", v " + shape_str(v.shape()));
  if (d == 0) throw ConfigError("attention key dimension must be positive");
  if (heads < 1 || d % heads || dv % heads)
    throw ConfigError("attention width " + std::to_string(d) + "/" + std::to_string(dv) + " not divisible by " +
                      std::to_string(heads) + " heads");

  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(d / heads));
  auto logits = ops::scale(ops::matmul(split_heads(q, heads), split_heads(k, heads), false, true), inv_scale);
  if (key_mask.defined()) {
    if (key_mask.shape() != Shape{batch, nk})
      throw ShapeError("attention key mask " + shape_str(key_mask.shape()) + " for keys " + shape_str(k.shape()));
    Tensor additive({batch * heads, 1, nk});
    auto dst = additive.data_mut();
    const auto m = key_mask.data();
    for (std::int64_t b = 0; b < batch; ++b)
      for (int h = 0; h < heads; ++h)
        for (std::int64_t j = 0; j < nk; ++j)
          dst[(b * heads + h) * nk + j] = m[b * nk + j] != 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
    logits = ops::add(logits, additive);
  }
  auto weights = ops::softmax(logits, -1);
  auto out = merge_heads(ops::matmul(weights, split_heads(v, heads)), batch, heads);
  return {out, ops::reshape(weights, {batch, heads, nq, nk})};
}

}  // namespace mrsnet
