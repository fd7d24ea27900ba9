#pragma once

#include "mrsnet/tensor.hpp"

namespace mrsnet {

struct AttentionOutput {
  Tensor output;   // (B, Nq, Dv)
  Tensor weights;  // (B, heads, Nq, Nk); rows sum to 1 over unmasked keys
};

// Scaled dot-product attention with `heads` heads split along the feature
// axis. q (B, Nq, D), k (B, Nk, D), v (B, Nk, Dv). `key_mask` is an optional
// constant (B, Nk) tensor; keys with mask 0 receive exactly zero weight.
AttentionOutput multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                                    const Tensor& key_mask = {});

}  // namespace mrsnet
