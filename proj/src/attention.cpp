#include "lgms/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace lgms::nn {

using ad::Tape;
using ad::Var;

void AttentionSpec::validate() const {
  if (embed_dim <= 0) throw std::invalid_argument("attention embed_dim must be positive");
  if (num_heads <= 0 || embed_dim % num_heads != 0)
    throw std::invalid_argument("attention embed_dim " + std::to_string(embed_dim) +
                                " not divisible by num_heads " + std::to_string(num_heads));
  if (depth < 1) throw std::invalid_argument("attention depth must be >= 1");
  if (mlp_ratio <= 0) throw std::invalid_argument("attention mlp_ratio must be positive");
}

Var linear(Tape& tape, Var x, Var w, Var b) {
  return tape.add(tape.matmul(x, w), b);
}

namespace {

// (N, T, d) -> (N*heads, T, d/heads)
Var split_heads(Tape& tape, Var x, int heads) {
  const Tensor& v = x.value();
  std::int64_t N = v.dim(0), T = v.dim(1), d = v.dim(2);
  std::int64_t hd = d / heads;
  Var r = tape.reshape(x, {N, T, heads, hd});
  r = tape.permute(r, {0, 2, 1, 3});
  return tape.reshape(r, {N * heads, T, hd});
}

Var merge_heads(Tape& tape, Var x, std::int64_t n, int heads) {
  const Tensor& v = x.value();
  std::int64_t T = v.dim(1), hd = v.dim(2);
  Var r = tape.reshape(x, {n, heads, T, hd});
  r = tape.permute(r, {0, 2, 1, 3});
  return tape.reshape(r, {n, T, static_cast<std::int64_t>(heads) * hd});
}

Var attention(Tape& tape, Var x, const AttentionSpec& spec, const MhsaLayerVars& p) {
  std::int64_t N = x.value().dim(0);
  DType dt = x.value().dtype();
  Var q = split_heads(tape, linear(tape, x, p.wq, p.bq), spec.num_heads);
  Var k = split_heads(tape, tape.matmul(x, p.wk), spec.num_heads);
  Var vv = split_heads(tape, linear(tape, x, p.wv, p.bv), spec.num_heads);
  double scale = 1.0 / std::sqrt(static_cast<double>(spec.head_dim()));
  Var scores = tape.matmul(q, tape.permute(k, {0, 2, 1}));
  scores = tape.mul(scores, tape.scalar_const(scale, dt));
  Var attn = tape.softmax(scores, -1);
  Var ctx = merge_heads(tape, tape.matmul(attn, vv), N, spec.num_heads);
  return linear(tape, ctx, p.wo, p.bo);
}

}  // namespace

Var mhsa_block(Tape& tape, Var tokens, const AttentionSpec& spec,
               std::span<const MhsaLayerVars> layers) {
  spec.validate();
  const Tensor& v = tokens.value();
  if (v.rank() != 3 || v.dim(2) != spec.embed_dim)
    throw std::invalid_argument("mhsa_block tokens must be (N, T, " +
                                std::to_string(spec.embed_dim) + "), got " +
                                shape_str(v.shape()));
  if (static_cast<int>(layers.size()) != spec.depth)
    throw std::invalid_argument("mhsa_block expects " + std::to_string(spec.depth) +
                                " layer parameter sets");
  Var x = tokens;
  for (const MhsaLayerVars& p : layers) {
    Var h = tape.layer_norm(x, p.ln1_gamma, p.ln1_beta, 1e-5);
    x = tape.add(x, attention(tape, h, spec, p));
    Var m = tape.layer_norm(x, p.ln2_gamma, p.ln2_beta, 1e-5);
    m = linear(tape, m, p.w1, p.b1);
    m = tape.silu(m);
    m = linear(tape, m, p.w2, p.b2);
    x = tape.add(x, m);
  }
  return x;
}

}  // namespace lgms::nn
