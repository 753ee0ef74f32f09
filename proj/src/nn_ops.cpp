#include "lgms/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace lgms::nn {

namespace {

template <class F>
void dispatch_dt(DType dt, F&& f) {
  if (dt == DType::f32)
    f(float{});
  else
    f(double{});
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void require_nchw(const Tensor& x, const char* who) {
  require(x.rank() == 4, std::string(who) + " expects an (N,C,H,W) tensor, got " +
                             shape_str(x.shape()));
}

template <typename T>
T sigmoid_scalar(T x) {
  // Split on sign so exp never overflows.
  if (x >= T(0)) {
    T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

// --- conv2d ------------------------------------------------------------------

void ConvSpec::validate() const {
  require(in_channels > 0 && out_channels > 0, "conv channels must be positive");
  require(kernel >= 1 && kernel % 2 == 1,
          "conv kernel must be odd, got " + std::to_string(kernel));
  require(groups >= 1, "conv groups must be >= 1");
  require(in_channels % groups == 0 && out_channels % groups == 0,
          "conv groups=" + std::to_string(groups) + " must divide in=" +
              std::to_string(in_channels) + " and out=" + std::to_string(out_channels));
}

Shape ConvSpec::weight_shape() const {
  return {out_channels, in_channels / groups, static_cast<std::int64_t>(kernel),
          static_cast<std::int64_t>(kernel)};
}

Tensor conv2d(const Tensor& x, const ConvSpec& spec, const Tensor& weight, const Tensor* bias) {
  spec.validate();
  require_nchw(x, "conv2d");
  require(x.dim(1) == spec.in_channels,
          "conv2d input has " + std::to_string(x.dim(1)) + " channels, spec expects " +
              std::to_string(spec.in_channels));
  require(weight.shape() == spec.weight_shape(),
          "conv2d weight shape " + shape_str(weight.shape()) + " != expected " +
              shape_str(spec.weight_shape()));
  require(weight.dtype() == x.dtype(), "conv2d weight dtype mismatch");
  if (spec.has_bias) {
    require(bias && bias->shape() == Shape{spec.out_channels} && bias->dtype() == x.dtype(),
            "conv2d bias missing or malformed");
  }

  const std::int64_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::int64_t OC = spec.out_channels;
  const std::int64_t ICg = spec.in_channels / spec.groups;
  const std::int64_t OCg = OC / spec.groups;
  const int k = spec.kernel, pad = spec.padding();

  Tensor out = Tensor::zeros({N, OC, H, W}, x.dtype());
  dispatch_dt(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>().data();
    const T* pw = weight.data<T>().data();
    const T* pb = spec.has_bias ? bias->data<T>().data() : nullptr;
    T* po = out.mutable_data<T>().data();

    parallel_for(N * OC, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t job = lo; job < hi; ++job) {
        const std::int64_t n = job / OC, oc = job % OC;
        const std::int64_t g = oc / OCg;
        T* oplane = po + (n * OC + oc) * H * W;
        if (pb) {
          T b = pb[oc];
          for (std::int64_t i = 0; i < H * W; ++i) oplane[i] = b;
        }
        const T* wbase = pw + oc * ICg * k * k;
        for (std::int64_t icg = 0; icg < ICg; ++icg) {
          const std::int64_t ic = g * ICg + icg;
          const T* iplane = px + (n * x.dim(1) + ic) * H * W;
          for (int kh = 0; kh < k; ++kh) {
            const std::int64_t dh = kh - pad;
            const std::int64_t oh_lo = std::max<std::int64_t>(0, -dh);
            const std::int64_t oh_hi = std::min<std::int64_t>(H, H - dh);
            for (int kw = 0; kw < k; ++kw) {
              const T wv = wbase[(icg * k + kh) * k + kw];
              if (wv == T(0)) continue;
              const std::int64_t dw = kw - pad;
              const std::int64_t ow_lo = std::max<std::int64_t>(0, -dw);
              const std::int64_t ow_hi = std::min<std::int64_t>(W, W - dw);
              for (std::int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                T* orow = oplane + oh * W;
                const T* irow = iplane + (oh + dh) * W + dw;
                for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * irow[ow];
              }
            }
          }
        }
      }
    });
  });
  return out;
}

ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& x, const Tensor& weight,
                          const ConvSpec& spec) {
  spec.validate();
  const std::int64_t N = x.dim(0), IC = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t OC = spec.out_channels;
  const std::int64_t ICg = IC / spec.groups;
  const std::int64_t OCg = OC / spec.groups;
  const int k = spec.kernel, pad = spec.padding();
  require(grad_out.shape() == Shape({N, OC, H, W}), "conv2d_backward grad shape mismatch");

  ConvGrads grads;
  grads.input = Tensor::zeros(x.shape(), x.dtype());
  grads.weight = Tensor::zeros(weight.shape(), x.dtype());
  if (spec.has_bias) grads.bias = Tensor::zeros({OC}, x.dtype());

  dispatch_dt(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>().data();
    const T* pw = weight.data<T>().data();
    const T* pg = grad_out.data<T>().data();
    T* pgi = grads.input.mutable_data<T>().data();
    T* pgw = grads.weight.mutable_data<T>().data();
    T* pgb = spec.has_bias ? grads.bias.mutable_data<T>().data() : nullptr;

    // Weight and bias gradients: one worker owns each output channel, batch
    // is accumulated in fixed n order.
    parallel_for(OC, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t oc = lo; oc < hi; ++oc) {
        const std::int64_t g = oc / OCg;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* gplane = pg + (n * OC + oc) * H * W;
          if (pgb) {
            T acc = T(0);
            for (std::int64_t i = 0; i < H * W; ++i) acc += gplane[i];
            pgb[oc] += acc;
          }
          for (std::int64_t icg = 0; icg < ICg; ++icg) {
            const std::int64_t ic = g * ICg + icg;
            const T* iplane = px + (n * IC + ic) * H * W;
            for (int kh = 0; kh < k; ++kh) {
              const std::int64_t dh = kh - pad;
              const std::int64_t oh_lo = std::max<std::int64_t>(0, -dh);
              const std::int64_t oh_hi = std::min<std::int64_t>(H, H - dh);
              for (int kw = 0; kw < k; ++kw) {
                const std::int64_t dw = kw - pad;
                const std::int64_t ow_lo = std::max<std::int64_t>(0, -dw);
                const std::int64_t ow_hi = std::min<std::int64_t>(W, W - dw);
                T acc = T(0);
                for (std::int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                  const T* grow = gplane + oh * W;
                  const T* irow = iplane + (oh + dh) * W + dw;
                  for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow) acc += grow[ow] * irow[ow];
                }
                pgw[((oc * ICg + icg) * k + kh) * k + kw] += acc;
              }
            }
          }
        }
      }
    });

    // Input gradient: one worker owns each (n, ic) plane.
    parallel_for(N * IC, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t job = lo; job < hi; ++job) {
        const std::int64_t n = job / IC, ic = job % IC;
        const std::int64_t g = ic / ICg, icg = ic % ICg;
        T* giplane = pgi + (n * IC + ic) * H * W;
        for (std::int64_t ocg = 0; ocg < OCg; ++ocg) {
          const std::int64_t oc = g * OCg + ocg;
          const T* gplane = pg + (n * OC + oc) * H * W;
          const T* wbase = pw + (oc * ICg + icg) * k * k;
          for (int kh = 0; kh < k; ++kh) {
            const std::int64_t dh = kh - pad;  // ih = oh + dh
            const std::int64_t ih_lo = std::max<std::int64_t>(0, dh);
            const std::int64_t ih_hi = std::min<std::int64_t>(H, H + dh);
            for (int kw = 0; kw < k; ++kw) {
              const T wv = wbase[kh * k + kw];
              if (wv == T(0)) continue;
              const std::int64_t dw = kw - pad;
              const std::int64_t iw_lo = std::max<std::int64_t>(0, dw);
              const std::int64_t iw_hi = std::min<std::int64_t>(W, W + dw);
              for (std::int64_t ih = ih_lo; ih < ih_hi; ++ih) {
                T* girow = giplane + ih * W;
                const T* grow = gplane + (ih - dh) * W - dw;
                for (std::int64_t iw = iw_lo; iw < iw_hi; ++iw) girow[iw] += wv * grow[iw];
              }
            }
          }
        }
      }
    });
  });
  return grads;
}

// --- maxpool -------------------------------------------------------------------

Tensor maxpool2x2(const Tensor& x, std::vector<std::int64_t>* argmax) {
  require_nchw(x, "maxpool2x2");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % 2 == 0 && W % 2 == 0,
          "maxpool2x2 requires even spatial extents, got " + shape_str(x.shape()));
  Tensor out = Tensor::zeros({N, C, H / 2, W / 2}, x.dtype());
  if (argmax) argmax->assign(static_cast<std::size_t>(out.numel()), 0);
  dispatch_dt(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>().data();
    T* po = out.mutable_data<T>().data();
    std::int64_t oi = 0;
    for (std::int64_t p = 0; p < N * C; ++p) {
      const T* plane = px + p * H * W;
      for (std::int64_t oh = 0; oh < H / 2; ++oh) {
        for (std::int64_t ow = 0; ow < W / 2; ++ow, ++oi) {
          std::int64_t base = (2 * oh) * W + 2 * ow;
          std::int64_t cand[4] = {base, base + 1, base + W, base + W + 1};
          std::int64_t best = cand[0];
          T bv = plane[base];
          for (int j = 1; j < 4; ++j) {
            if (plane[cand[j]] > bv) {  // strict: first max wins ties
              bv = plane[cand[j]];
              best = cand[j];
            }
          }
          po[oi] = bv;
          if (argmax) (*argmax)[static_cast<std::size_t>(oi)] = p * H * W + best;
        }
      }
    }
  });
  return out;
}

Tensor maxpool2x2_backward(const Tensor& grad_out, const std::vector<std::int64_t>& argmax,
                           const Shape& input_shape) {
  require(static_cast<std::int64_t>(argmax.size()) == grad_out.numel(),
          "maxpool2x2_backward argmax size mismatch");
  Tensor gin = Tensor::zeros(input_shape, grad_out.dtype());
  for (std::int64_t i = 0; i < grad_out.numel(); ++i)
    gin.set_flat(argmax[static_cast<std::size_t>(i)],
                 gin.at_flat(argmax[static_cast<std::size_t>(i)]) + grad_out.at_flat(i));
  return gin;
}

// --- bilinear -------------------------------------------------------------------

namespace {

struct Lerp {
  std::int64_t i0, i1;
  double f;  // weight on i1
};

std::vector<Lerp> half_pixel_table(std::int64_t out_len, std::int64_t in_len, double scale) {
  std::vector<Lerp> t(static_cast<std::size_t>(out_len));
  for (std::int64_t i = 0; i < out_len; ++i) {
    double s = (static_cast<double>(i) + 0.5) / scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in_len - 1));
    std::int64_t i0 = static_cast<std::int64_t>(std::floor(s));
    i0 = std::min(i0, in_len - 1);
    std::int64_t i1 = std::min(i0 + 1, in_len - 1);
    t[static_cast<std::size_t>(i)] = {i0, i1, s - static_cast<double>(i0)};
  }
  return t;
}

}  // namespace

Tensor upsample_bilinear_2x(const Tensor& x) {
  require_nchw(x, "upsample_bilinear_2x");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out = Tensor::zeros({N, C, 2 * H, 2 * W}, x.dtype());
  auto th = half_pixel_table(2 * H, H, 2.0);
  auto tw = half_pixel_table(2 * W, W, 2.0);
  dispatch_dt(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>().data();
    T* po = out.mutable_data<T>().data();
    parallel_for(N * C, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t p = lo; p < hi; ++p) {
        const T* in = px + p * H * W;
        T* o = po + p * 4 * H * W;
        for (std::int64_t oh = 0; oh < 2 * H; ++oh) {
          const auto& lh = th[static_cast<std::size_t>(oh)];
          const T* r0 = in + lh.i0 * W;
          const T* r1 = in + lh.i1 * W;
          T fh = static_cast<T>(lh.f);
          for (std::int64_t ow = 0; ow < 2 * W; ++ow) {
            const auto& lw = tw[static_cast<std::size_t>(ow)];
            T fw = static_cast<T>(lw.f);
            T top = r0[lw.i0] + fw * (r0[lw.i1] - r0[lw.i0]);
            T bot = r1[lw.i0] + fw * (r1[lw.i1] - r1[lw.i0]);
            o[oh * 2 * W + ow] = top + fh * (bot - top);
          }
        }
      }
    });
  });
  return out;
}

Tensor upsample_bilinear_2x_backward(const Tensor& grad_out, const Shape& input_shape) {
  const std::int64_t N = input_shape[0], C = input_shape[1], H = input_shape[2],
                     W = input_shape[3];
  require(grad_out.shape() == Shape({N, C, 2 * H, 2 * W}),
          "upsample_bilinear_2x_backward shape mismatch");
  Tensor gin = Tensor::zeros(input_shape, grad_out.dtype());
  auto th = half_pixel_table(2 * H, H, 2.0);
  auto tw = half_pixel_table(2 * W, W, 2.0);
  dispatch_dt(grad_out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pg = grad_out.data<T>().data();
    T* pi = gin.mutable_data<T>().data();
    parallel_for(N * C, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t p = lo; p < hi; ++p) {
        const T* g = pg + p * 4 * H * W;
        T* gi = pi + p * H * W;
        for (std::int64_t oh = 0; oh < 2 * H; ++oh) {
          const auto& lh = th[static_cast<std::size_t>(oh)];
          T fh = static_cast<T>(lh.f);
          for (std::int64_t ow = 0; ow < 2 * W; ++ow) {
            const auto& lw = tw[static_cast<std::size_t>(ow)];
            T fw = static_cast<T>(lw.f);
            T gv = g[oh * 2 * W + ow];
            gi[lh.i0 * W + lw.i0] += (T(1) - fh) * (T(1) - fw) * gv;
            gi[lh.i0 * W + lw.i1] += (T(1) - fh) * fw * gv;
            gi[lh.i1 * W + lw.i0] += fh * (T(1) - fw) * gv;
            gi[lh.i1 * W + lw.i1] += fh * fw * gv;
          }
        }
      }
    });
  });
  return gin;
}

Tensor resize_bilinear(const Tensor& chw, std::int64_t out_h, std::int64_t out_w) {
  require(chw.rank() == 3, "resize_bilinear expects (C,H,W)");
  const std::int64_t C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  auto th = half_pixel_table(out_h, H, static_cast<double>(out_h) / static_cast<double>(H));
  auto tw = half_pixel_table(out_w, W, static_cast<double>(out_w) / static_cast<double>(W));
  Tensor out = Tensor::zeros({C, out_h, out_w}, chw.dtype());
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t oh = 0; oh < out_h; ++oh) {
      const auto& lh = th[static_cast<std::size_t>(oh)];
      for (std::int64_t ow = 0; ow < out_w; ++ow) {
        const auto& lw = tw[static_cast<std::size_t>(ow)];
        double v00 = chw.at_flat((c * H + lh.i0) * W + lw.i0);
        double v01 = chw.at_flat((c * H + lh.i0) * W + lw.i1);
        double v10 = chw.at_flat((c * H + lh.i1) * W + lw.i0);
        double v11 = chw.at_flat((c * H + lh.i1) * W + lw.i1);
        double top = v00 + lw.f * (v01 - v00);
        double bot = v10 + lw.f * (v11 - v10);
        out.set_flat((c * out_h + oh) * out_w + ow, top + lh.f * (bot - top));
      }
    }
  }
  return out;
}

Tensor resize_nearest(const Tensor& chw, std::int64_t out_h, std::int64_t out_w) {
  require(chw.rank() == 3, "resize_nearest expects (C,H,W)");
  const std::int64_t C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  Tensor out = Tensor::zeros({C, out_h, out_w}, chw.dtype());
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t oh = 0; oh < out_h; ++oh) {
      std::int64_t ih = std::min(H - 1, oh * H / out_h);
      for (std::int64_t ow = 0; ow < out_w; ++ow) {
        std::int64_t iw = std::min(W - 1, ow * W / out_w);
        out.set_flat((c * out_h + oh) * out_w + ow, chw.at_flat((c * H + ih) * W + iw));
      }
    }
  return out;
}

// --- normalization ------------------------------------------------------------

void NormSpec::validate(std::int64_t channels) const {
  require(epsilon > 0, "norm epsilon must be > 0");
  if (kind == Kind::group)
    require(num_groups >= 1 && channels % num_groups == 0,
            "group norm: " + std::to_string(num_groups) + " groups do not divide " +
                std::to_string(channels) + " channels");
}

namespace {

// Shared core: regions are contiguous runs of length m; `affine_index(flat)`
// maps a flat element index to its gamma/beta slot.
template <typename T, class AffineIdx>
void norm_regions_forward(const T* px, T* py, T* pxhat, T* pinv, std::int64_t regions,
                          std::int64_t m, const T* gamma, const T* beta, double eps,
                          AffineIdx affine_index) {
  for (std::int64_t r = 0; r < regions; ++r) {
    const T* xr = px + r * m;
    double mean = 0;
    for (std::int64_t i = 0; i < m; ++i) mean += static_cast<double>(xr[i]);
    mean /= static_cast<double>(m);
    double var = 0;
    for (std::int64_t i = 0; i < m; ++i) {
      double d = static_cast<double>(xr[i]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(m);
    double inv = 1.0 / std::sqrt(var + eps);
    pinv[r] = static_cast<T>(inv);
    T* yr = py + r * m;
    T* hr = pxhat + r * m;
    for (std::int64_t i = 0; i < m; ++i) {
      T h = static_cast<T>((static_cast<double>(xr[i]) - mean) * inv);
      hr[i] = h;
      std::int64_t a = affine_index(r * m + i);
      yr[i] = gamma[a] * h + beta[a];
    }
  }
}

template <typename T, class AffineIdx>
void norm_regions_backward(const T* pg, const T* pxhat, const T* pinv, std::int64_t regions,
                           std::int64_t m, const T* gamma, T* pgi, T* pgg, T* pgb,
                           AffineIdx affine_index) {
  for (std::int64_t r = 0; r < regions; ++r) {
    const T* gr = pg + r * m;
    const T* hr = pxhat + r * m;
    double mean_dh = 0, mean_dh_h = 0;
    for (std::int64_t i = 0; i < m; ++i) {
      std::int64_t a = affine_index(r * m + i);
      double dh = static_cast<double>(gr[i]) * static_cast<double>(gamma[a]);
      mean_dh += dh;
      mean_dh_h += dh * static_cast<double>(hr[i]);
      pgg[a] += static_cast<T>(static_cast<double>(gr[i]) * static_cast<double>(hr[i]));
      pgb[a] += gr[i];
    }
    mean_dh /= static_cast<double>(m);
    mean_dh_h /= static_cast<double>(m);
    double inv = static_cast<double>(pinv[r]);
    T* gi = pgi + r * m;
    for (std::int64_t i = 0; i < m; ++i) {
      std::int64_t a = affine_index(r * m + i);
      double dh = static_cast<double>(gr[i]) * static_cast<double>(gamma[a]);
      gi[i] = static_cast<T>(inv * (dh - mean_dh - static_cast<double>(hr[i]) * mean_dh_h));
    }
  }
}

}  // namespace

NormOut group_norm(const Tensor& x, int num_groups, const Tensor& gamma, const Tensor& beta,
                   double epsilon) {
  require_nchw(x, "group_norm");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  NormSpec spec{NormSpec::Kind::group, num_groups, epsilon, 0.0};
  spec.validate(C);
  require(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, "group_norm affine must be (C)");
  const std::int64_t G = num_groups, Cg = C / G, m = Cg * H * W;
  NormOut out;
  out.y = Tensor::zeros(x.shape(), x.dtype());
  out.xhat = Tensor::zeros(x.shape(), x.dtype());
  out.inv_std = Tensor::zeros({N * G}, x.dtype());
  dispatch_dt(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    norm_regions_forward<T>(x.data<T>().data(), out.y.mutable_data<T>().data(),
                            out.xhat.mutable_data<T>().data(),
                            out.inv_std.mutable_data<T>().data(), N * G, m,
                            gamma.data<T>().data(), beta.data<T>().data(), epsilon,
                            [&](std::int64_t flat) { return (flat / (H * W)) % C; });
  });
  return out;
}

NormGrads group_norm_backward(const Tensor& grad_out, const Tensor& xhat, const Tensor& inv_std,
                              const Tensor& gamma, int num_groups) {
  const std::int64_t N = xhat.dim(0), C = xhat.dim(1), H = xhat.dim(2), W = xhat.dim(3);
  const std::int64_t G = num_groups, m = (C / G) * H * W;
  NormGrads g;
  g.input = Tensor::zeros(xhat.shape(), xhat.dtype());
  g.gamma = Tensor::zeros({C}, xhat.dtype());
  g.beta = Tensor::zeros({C}, xhat.dtype());
  dispatch_dt(xhat.dtype(), [&](auto tag) {
    using T = decltype(tag);
    norm_regions_backward<T>(grad_out.data<T>().data(), xhat.data<T>().data(),
                             inv_std.data<T>().data(), N * G, m, gamma.data<T>().data(),
                             g.input.mutable_data<T>().data(), g.gamma.mutable_data<T>().data(),
                             g.beta.mutable_data<T>().data(),
                             [&](std::int64_t flat) { return (flat / (H * W)) % C; });
  });
  return g;
}

NormOut layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double epsilon) {
  require(x.rank() >= 1, "layer_norm expects rank >= 1");
  const std::int64_t D = x.dim(x.rank() - 1);
  require(gamma.shape() == Shape{D} && beta.shape() == Shape{D}, "layer_norm affine must be (D)");
  require(epsilon > 0, "norm epsilon must be > 0");
  const std::int64_t B = x.numel() / D;
  NormOut out;
  out.y = Tensor::zeros(x.shape(), x.dtype());
  out.xhat = Tensor::zeros(x.shape(), x.dtype());
  out.inv_std = Tensor::zeros({B}, x.dtype());
  dispatch_dt(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    norm_regions_forward<T>(x.data<T>().data(), out.y.mutable_data<T>().data(),
                            out.xhat.mutable_data<T>().data(),
                            out.inv_std.mutable_data<T>().data(), B, D, gamma.data<T>().data(),
                            beta.data<T>().data(), epsilon,
                            [&](std::int64_t flat) { return flat % D; });
  });
  return out;
}

NormGrads layer_norm_backward(const Tensor& grad_out, const Tensor& xhat, const Tensor& inv_std,
                              const Tensor& gamma) {
  const std::int64_t D = xhat.dim(xhat.rank() - 1);
  const std::int64_t B = xhat.numel() / D;
  NormGrads g;
  g.input = Tensor::zeros(xhat.shape(), xhat.dtype());
  g.gamma = Tensor::zeros({D}, xhat.dtype());
  g.beta = Tensor::zeros({D}, xhat.dtype());
  dispatch_dt(xhat.dtype(), [&](auto tag) {
    using T = decltype(tag);
    norm_regions_backward<T>(grad_out.data<T>().data(), xhat.data<T>().data(),
                             inv_std.data<T>().data(), B, D, gamma.data<T>().data(),
                             g.input.mutable_data<T>().data(), g.gamma.mutable_data<T>().data(),
                             g.beta.mutable_data<T>().data(),
                             [&](std::int64_t flat) { return flat % D; });
  });
  return g;
}

NormOut batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   const Tensor& running_mean, const Tensor& running_var, double epsilon,
                   bool training) {
  require_nchw(x, "batch_norm");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, "batch_norm affine must be (C)");
  require(epsilon > 0, "norm epsilon must be > 0");
  const std::int64_t m = N * H * W;
  NormOut out;
  out.y = Tensor::zeros(x.shape(), x.dtype());
  out.xhat = Tensor::zeros(x.shape(), x.dtype());
  out.inv_std = Tensor::zeros({C}, x.dtype());
  out.batch_mean = Tensor::zeros({C}, x.dtype());
  out.batch_var = Tensor::zeros({C}, x.dtype());
  dispatch_dt(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>().data();
    T* py = out.y.mutable_data<T>().data();
    T* ph = out.xhat.mutable_data<T>().data();
    T* pinv = out.inv_std.mutable_data<T>().data();
    const T* pgm = gamma.data<T>().data();
    const T* pbt = beta.data<T>().data();
    for (std::int64_t c = 0; c < C; ++c) {
      double mean, var;
      if (training) {
        mean = 0;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* plane = px + (n * C + c) * H * W;
          for (std::int64_t i = 0; i < H * W; ++i) mean += static_cast<double>(plane[i]);
        }
        mean /= static_cast<double>(m);
        var = 0;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* plane = px + (n * C + c) * H * W;
          for (std::int64_t i = 0; i < H * W; ++i) {
            double d = static_cast<double>(plane[i]) - mean;
            var += d * d;
          }
        }
        var /= static_cast<double>(m);
        out.batch_mean.set_flat(c, mean);
        out.batch_var.set_flat(c, var);
      } else {
        mean = running_mean.at_flat(c);
        var = running_var.at_flat(c);
      }
      double inv = 1.0 / std::sqrt(var + epsilon);
      pinv[c] = static_cast<T>(inv);
      for (std::int64_t n = 0; n < N; ++n) {
        const T* plane = px + (n * C + c) * H * W;
        T* yp = py + (n * C + c) * H * W;
        T* hp = ph + (n * C + c) * H * W;
        for (std::int64_t i = 0; i < H * W; ++i) {
          T h = static_cast<T>((static_cast<double>(plane[i]) - mean) * inv);
          hp[i] = h;
          yp[i] = pgm[c] * h + pbt[c];
        }
      }
    }
  });
  return out;
}

NormGrads batch_norm_backward(const Tensor& grad_out, const Tensor& xhat, const Tensor& inv_std,
                              const Tensor& gamma, bool training) {
  const std::int64_t N = xhat.dim(0), C = xhat.dim(1), H = xhat.dim(2), W = xhat.dim(3);
  const std::int64_t m = N * H * W;
  NormGrads g;
  g.input = Tensor::zeros(xhat.shape(), xhat.dtype());
  g.gamma = Tensor::zeros({C}, xhat.dtype());
  g.beta = Tensor::zeros({C}, xhat.dtype());
  dispatch_dt(xhat.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pg = grad_out.data<T>().data();
    const T* ph = xhat.data<T>().data();
    const T* pinv = inv_std.data<T>().data();
    const T* pgm = gamma.data<T>().data();
    T* pgi = g.input.mutable_data<T>().data();
    T* pgg = g.gamma.mutable_data<T>().data();
    T* pgb = g.beta.mutable_data<T>().data();
    for (std::int64_t c = 0; c < C; ++c) {
      double sum_g = 0, sum_gh = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* gp = pg + (n * C + c) * H * W;
        const T* hp = ph + (n * C + c) * H * W;
        for (std::int64_t i = 0; i < H * W; ++i) {
          sum_g += static_cast<double>(gp[i]);
          sum_gh += static_cast<double>(gp[i]) * static_cast<double>(hp[i]);
        }
      }
      pgg[c] += static_cast<T>(sum_gh);
      pgb[c] += static_cast<T>(sum_g);
      double inv = static_cast<double>(pinv[c]);
      double gm = static_cast<double>(pgm[c]);
      double mean_dh = gm * sum_g / static_cast<double>(m);
      double mean_dh_h = gm * sum_gh / static_cast<double>(m);
      for (std::int64_t n = 0; n < N; ++n) {
        const T* gp = pg + (n * C + c) * H * W;
        const T* hp = ph + (n * C + c) * H * W;
        T* gip = pgi + (n * C + c) * H * W;
        for (std::int64_t i = 0; i < H * W; ++i) {
          double dh = static_cast<double>(gp[i]) * gm;
          double v = training
                         ? inv * (dh - mean_dh - static_cast<double>(hp[i]) * mean_dh_h)
                         : inv * dh;  // inference stats are constants
          gip[i] = static_cast<T>(v);
        }
      }
    }
  });
  return g;
}

// --- activations -----------------------------------------------------------------

Tensor silu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch_dt(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>().data();
    T* po = out.mutable_data<T>().data();
    for (std::int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] * sigmoid_scalar(px[i]);
  });
  return out;
}

Tensor silu_backward(const Tensor& grad_out, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch_dt(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>().data();
    const T* pg = grad_out.data<T>().data();
    T* po = out.mutable_data<T>().data();
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      T s = sigmoid_scalar(px[i]);
      po[i] = pg[i] * s * (T(1) + px[i] * (T(1) - s));
    }
  });
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch_dt(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>().data();
    T* po = out.mutable_data<T>().data();
    for (std::int64_t i = 0; i < x.numel(); ++i) po[i] = sigmoid_scalar(px[i]);
  });
  return out;
}

Tensor sigmoid_backward(const Tensor& grad_out, const Tensor& y) {
  Tensor out = Tensor::zeros(y.shape(), y.dtype());
  dispatch_dt(y.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* py = y.data<T>().data();
    const T* pg = grad_out.data<T>().data();
    T* po = out.mutable_data<T>().data();
    for (std::int64_t i = 0; i < y.numel(); ++i) po[i] = pg[i] * py[i] * (T(1) - py[i]);
  });
  return out;
}

// --- softmax ----------------------------------------------------------------------

namespace {

void softmax_geometry(const Tensor& x, int& axis, std::int64_t& outer, std::int64_t& len,
                      std::int64_t& inner) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank())
    throw std::invalid_argument("softmax axis out of range for " + shape_str(x.shape()));
  outer = 1;
  inner = 1;
  len = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  std::int64_t outer, len, inner;
  softmax_geometry(x, axis, outer, len, inner);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch_dt(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>().data();
    T* po = out.mutable_data<T>().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const T* lane = px + o * len * inner + in;
        T* olane = po + o * len * inner + in;
        T mx = lane[0];
        for (std::int64_t l = 1; l < len; ++l) mx = std::max(mx, lane[l * inner]);
        double denom = 0;
        for (std::int64_t l = 0; l < len; ++l) {
          double e = std::exp(static_cast<double>(lane[l * inner] - mx));
          olane[l * inner] = static_cast<T>(e);
          denom += e;
        }
        for (std::int64_t l = 0; l < len; ++l)
          olane[l * inner] = static_cast<T>(static_cast<double>(olane[l * inner]) / denom);
      }
    }
  });
  return out;
}

Tensor softmax_backward(const Tensor& grad_out, const Tensor& y, int axis) {
  std::int64_t outer, len, inner;
  softmax_geometry(y, axis, outer, len, inner);
  Tensor out = Tensor::zeros(y.shape(), y.dtype());
  dispatch_dt(y.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* py = y.data<T>().data();
    const T* pg = grad_out.data<T>().data();
    T* po = out.mutable_data<T>().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        std::int64_t base = o * len * inner + in;
        double dot = 0;
        for (std::int64_t l = 0; l < len; ++l)
          dot += static_cast<double>(pg[base + l * inner]) *
                 static_cast<double>(py[base + l * inner]);
        for (std::int64_t l = 0; l < len; ++l)
          po[base + l * inner] = static_cast<T>(
              static_cast<double>(py[base + l * inner]) *
              (static_cast<double>(pg[base + l * inner]) - dot));
      }
    }
  });
  return out;
}

// --- unfold / fold ------------------------------------------------------------------

Tensor unfold_patches(const Tensor& x, int p) {
  require_nchw(x, "unfold_patches");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(p >= 1 && H % p == 0 && W % p == 0,
          "unfold_patches: patch size " + std::to_string(p) + " must divide " +
              shape_str(x.shape()));
  const std::int64_t PH = H / p, PW = W / p;
  Tensor out = Tensor::zeros({N, PH * PW, C * p * p}, x.dtype());
  dispatch_dt(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>().data();
    T* po = out.mutable_data<T>().data();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t h = 0; h < H; ++h) {
          std::int64_t ph = h / p, r = h % p;
          const T* row = px + ((n * C + c) * H + h) * W;
          for (std::int64_t w = 0; w < W; ++w) {
            std::int64_t pw = w / p, col = w % p;
            std::int64_t t = ph * PW + pw;
            std::int64_t j = (c * p + r) * p + col;
            po[(n * PH * PW + t) * C * p * p + j] = row[w];
          }
        }
  });
  return out;
}

Tensor fold_patches(const Tensor& tokens, int p, std::int64_t channels, std::int64_t h,
                    std::int64_t w) {
  require(tokens.rank() == 3, "fold_patches expects (N, T, D)");
  const std::int64_t N = tokens.dim(0), Tn = tokens.dim(1), D = tokens.dim(2);
  require(p >= 1 && h % p == 0 && w % p == 0 && Tn == (h / p) * (w / p) &&
              D == channels * p * p,
          "fold_patches geometry mismatch for tokens " + shape_str(tokens.shape()));
  const std::int64_t PW = w / p;
  Tensor out = Tensor::zeros({N, channels, h, w}, tokens.dtype());
  dispatch_dt(tokens.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pt = tokens.data<T>().data();
    T* po = out.mutable_data<T>().data();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < channels; ++c)
        for (std::int64_t hh = 0; hh < h; ++hh) {
          std::int64_t ph = hh / p, r = hh % p;
          T* row = po + ((n * channels + c) * h + hh) * w;
          for (std::int64_t ww = 0; ww < w; ++ww) {
            std::int64_t pw = ww / p, col = ww % p;
            std::int64_t t = ph * PW + pw;
            std::int64_t j = (c * p + r) * p + col;
            row[ww] = pt[(n * Tn + t) * D + j];
          }
        }
  });
  return out;
}

// --- loss -----------------------------------------------------------------------------

Tensor bce_with_logits(const Tensor& logits, const Tensor& target) {
  require(logits.shape() == target.shape(),
          "bce_with_logits shapes differ: " + shape_str(logits.shape()) + " vs " +
              shape_str(target.shape()));
  double acc = 0;
  for (std::int64_t i = 0; i < logits.numel(); ++i) {
    double z = logits.at_flat(i), y = target.at_flat(i);
    acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  return Tensor::scalar(acc / static_cast<double>(logits.numel()), logits.dtype());
}

Tensor bce_with_logits_backward(const Tensor& grad_out, const Tensor& logits,
                                const Tensor& target) {
  Tensor out = Tensor::zeros(logits.shape(), logits.dtype());
  double g = grad_out.item() / static_cast<double>(logits.numel());
  dispatch_dt(logits.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pz = logits.data<T>().data();
    const T* py = target.data<T>().data();
    T* po = out.mutable_data<T>().data();
    for (std::int64_t i = 0; i < logits.numel(); ++i)
      po[i] = static_cast<T>(g) * (sigmoid_scalar(pz[i]) - py[i]);
  });
  return out;
}

}  // namespace lgms::nn
