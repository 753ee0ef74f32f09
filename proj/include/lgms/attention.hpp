#pragma once

#include <span>

#include "lgms/autograd.hpp"

namespace lgms::nn {

struct AttentionSpec {
  std::int64_t embed_dim = 0;
  int num_heads = 4;
  double mlp_ratio = 2.0;
  int depth = 2;

  std::int64_t head_dim() const { return embed_dim / num_heads; }
  std::int64_t hidden_dim() const {
    return static_cast<std::int64_t>(mlp_ratio * static_cast<double>(embed_dim) + 0.5);
  }
  void validate() const;
};

// One pre-norm transformer layer's parameters, already bound to a tape.
// The key projection carries no bias: a constant added to every key shifts
// each softmax row uniformly and cancels, so such a bias could never train.
struct MhsaLayerVars {
  ad::Var ln1_gamma, ln1_beta;
  ad::Var wq, bq, wk, wv, bv, wo, bo;
  ad::Var ln2_gamma, ln2_beta;
  ad::Var w1, b1, w2, b2;
};

// y = x @ w + b with x (..., K), w (K, N), b (N).
ad::Var linear(ad::Tape& tape, ad::Var x, ad::Var w, ad::Var b);

// Stack of `layers` pre-norm transformer layers over tokens (N, T, d):
// per layer, multi-head self-attention with residual, then a 2-layer
// SiLU MLP with residual. No positional embedding is added.
ad::Var mhsa_block(ad::Tape& tape, ad::Var tokens, const AttentionSpec& spec,
                   std::span<const MhsaLayerVars> layers);

}  // namespace lgms::nn
