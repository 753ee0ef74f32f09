#pragma once

#include <cstdint>
#include <optional>

#include "lgms/tensor.hpp"

namespace lgms::nn {

// All convolutions in this project run at stride 1 with zero "same" padding
// (pad = k/2), so spatial extent is preserved. Spatial resizing happens only
// through maxpool2x2 / upsample_bilinear_2x.
struct ConvSpec {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  int kernel = 3;  // odd
  int groups = 1;
  bool has_bias = true;

  int padding() const { return kernel / 2; }
  void validate() const;
  Shape weight_shape() const;  // (out, in/groups, k, k)
};

// x: (N, C, H, W); weight: (out, in/groups, k, k); bias: (out) or null.
Tensor conv2d(const Tensor& x, const ConvSpec& spec, const Tensor& weight,
              const Tensor* bias);

struct ConvGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;  // undefined when the conv has no bias
};
ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& x, const Tensor& weight,
                          const ConvSpec& spec);

// --- pooling / resampling ----------------------------------------------------

// Requires even H and W. `argmax`, when non-null, receives the flat input
// index of each window's maximum (first maximal element in row-major order
// on ties) for gradient routing.
Tensor maxpool2x2(const Tensor& x, std::vector<std::int64_t>* argmax = nullptr);
Tensor maxpool2x2_backward(const Tensor& grad_out, const std::vector<std::int64_t>& argmax,
                           const Shape& input_shape);

// Half-pixel-center bilinear 2x upsample: source coordinate for output index
// t is s = (t + 0.5) / 2 - 0.5, clamped to [0, L - 1].
Tensor upsample_bilinear_2x(const Tensor& x);
Tensor upsample_bilinear_2x_backward(const Tensor& grad_out, const Shape& input_shape);

// General bilinear resize for dataset ingestion (not differentiated).
Tensor resize_bilinear(const Tensor& chw, std::int64_t out_h, std::int64_t out_w);
Tensor resize_nearest(const Tensor& chw, std::int64_t out_h, std::int64_t out_w);

// --- normalization -----------------------------------------------------------

struct NormSpec {
  enum class Kind { batch, group, layer };
  Kind kind = Kind::batch;
  int num_groups = 1;      // group kind only
  double epsilon = 1e-5;
  double momentum = 0.1;   // batch kind only
  void validate(std::int64_t channels) const;
};

// Saved context shared by the backward passes: xhat is the pre-affine
// normalized tensor, inv_std one value per normalization region.
struct NormOut {
  Tensor y;
  Tensor xhat;
  Tensor inv_std;
  Tensor batch_mean;  // batch kind, training mode
  Tensor batch_var;
};

struct NormGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};

// group_norm: x (N,C,H,W), stats per (n, group) over (C/G, H, W); affine per channel.
NormOut group_norm(const Tensor& x, int num_groups, const Tensor& gamma, const Tensor& beta,
                   double epsilon);
NormGrads group_norm_backward(const Tensor& grad_out, const Tensor& xhat, const Tensor& inv_std,
                              const Tensor& gamma, int num_groups);

// layer_norm: x (..., D), stats over the last axis; affine per last-axis index.
NormOut layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double epsilon);
NormGrads layer_norm_backward(const Tensor& grad_out, const Tensor& xhat, const Tensor& inv_std,
                              const Tensor& gamma);

// batch_norm: x (N,C,H,W), stats per channel over (N,H,W). In training mode
// batch statistics are used and returned so the caller can fold them into
// running buffers; in inference mode running_mean/var are applied directly.
NormOut batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   const Tensor& running_mean, const Tensor& running_var, double epsilon,
                   bool training);
NormGrads batch_norm_backward(const Tensor& grad_out, const Tensor& xhat, const Tensor& inv_std,
                              const Tensor& gamma, bool training);

// --- activations ---------------------------------------------------------------

Tensor silu(const Tensor& x);  // x * sigmoid(x)
Tensor silu_backward(const Tensor& grad_out, const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor sigmoid_backward(const Tensor& grad_out, const Tensor& y);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);
Tensor softmax_backward(const Tensor& grad_out, const Tensor& y, int axis);

// --- patch unfold / fold ---------------------------------------------------------
//
// unfold_patches: (N, C, H, W) with p | H and p | W -> (N, H*W/p^2, C*p^2).
// Token t is the patch index in row-major patch order; within a token,
// elements are ordered (channel, intra-patch row, intra-patch col).
// fold_patches inverts it bit-exactly.
Tensor unfold_patches(const Tensor& x, int p);
Tensor fold_patches(const Tensor& tokens, int p, std::int64_t channels, std::int64_t h,
                    std::int64_t w);

// --- losses -----------------------------------------------------------------------
//
// Mean-reduced binary cross entropy on logits, computed in the stable form
// max(z,0) - z*y + log1p(exp(-|z|)).
Tensor bce_with_logits(const Tensor& logits, const Tensor& target);
Tensor bce_with_logits_backward(const Tensor& grad_out, const Tensor& logits,
                                const Tensor& target);

}  // namespace lgms::nn
