#include "lgms/gradcheck_suite.hpp"

#include <cmath>

#include "lgms/attention.hpp"
#include "lgms/nn_ops.hpp"

namespace lgms::ad {

namespace {

Tensor randn(Rng& rng, Shape shape, double std = 1.0) {
  return random_normal(rng, std::move(shape), 0.0, std, DType::f64);
}

// |values| bounded away from zero so division stays well conditioned
Tensor rand_nonzero(Rng& rng, Shape shape) {
  Tensor t = randn(rng, std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    double v = t.at_flat(i);
    t.set_flat(i, v >= 0 ? v + 0.5 : v - 0.5);
  }
  return t;
}

struct Case {
  std::string op;
  std::vector<Tensor> inputs;
  TapeFn fn;
};

std::vector<Case> build_cases(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Case> cases;

  {
    Rng r = rng.derive("ew");
    cases.push_back({"add",
                     {randn(r, {2, 3, 4}), randn(r, {3, 4})},
                     [](Tape& t, std::span<const Var> v) { return t.sum(t.add(v[0], v[1])); }});
    cases.push_back({"sub",
                     {randn(r, {2, 3, 4}), randn(r, {2, 3, 4})},
                     [](Tape& t, std::span<const Var> v) {
                       return t.sum(t.mul(t.sub(v[0], v[1]), v[1]));
                     }});
    cases.push_back({"mul",
                     {randn(r, {4, 5}), randn(r, {5})},
                     [](Tape& t, std::span<const Var> v) { return t.sum(t.mul(v[0], v[1])); }});
    cases.push_back({"div",
                     {randn(r, {3, 4}), rand_nonzero(r, {3, 4})},
                     [](Tape& t, std::span<const Var> v) { return t.sum(t.div(v[0], v[1])); }});
    cases.push_back({"max",
                     {randn(r, {4, 6}), randn(r, {4, 6})},
                     [](Tape& t, std::span<const Var> v) {
                       return t.sum(t.maxelem(v[0], v[1]));
                     }});
  }

  {
    Rng r = rng.derive("matmul");
    Tensor w = randn(r, {2, 3, 5});
    cases.push_back({"matmul",
                     {randn(r, {2, 3, 4}), randn(r, {4, 5})},
                     [w](Tape& t, std::span<const Var> v) {
                       return t.sum(t.mul(t.matmul(v[0], v[1]), t.constant(w)));
                     }});
  }

  {
    Rng r = rng.derive("shape");
    Tensor c = randn(r, {4, 6});
    cases.push_back(
        {"reshape_permute_concat_split",
         {randn(r, {2, 3, 4}), c},
         [](Tape& t, std::span<const Var> v) {
           Var x = t.permute(t.reshape(v[0], {3, 2, 4}), {1, 0, 2});  // (2,3,4)
           auto parts = t.split(x, 2, {1, 3});
           std::vector<Var> back = {parts[1], parts[0]};
           Var y = t.reshape(t.concat(back, 2), {4, 6});
           return t.sum(t.mul(y, v[1]));
         }});
  }

  {
    Rng r = rng.derive("conv");
    nn::ConvSpec plain{3, 4, 3, 1, true};
    Tensor wp = randn(r, {2, 4, 5, 5});
    cases.push_back({"conv2d",
                     {randn(r, {2, 3, 5, 5}), randn(r, plain.weight_shape()), randn(r, {4})},
                     [plain, wp](Tape& t, std::span<const Var> v) {
                       return t.sum(t.mul(t.conv2d(v[0], plain, v[1], v[2]), t.constant(wp)));
                     }});
    nn::ConvSpec grouped{4, 6, 3, 2, true};
    Tensor wg = randn(r, {1, 6, 6, 6});
    cases.push_back({"conv2d_grouped",
                     {randn(r, {1, 4, 6, 6}), randn(r, grouped.weight_shape()), randn(r, {6})},
                     [grouped, wg](Tape& t, std::span<const Var> v) {
                       return t.sum(t.mul(t.conv2d(v[0], grouped, v[1], v[2]), t.constant(wg)));
                     }});
    nn::ConvSpec dw{3, 3, 5, 3, false};
    Tensor wd = randn(r, {2, 3, 6, 6});
    cases.push_back({"conv2d_depthwise",
                     {randn(r, {2, 3, 6, 6}), randn(r, dw.weight_shape())},
                     [dw, wd](Tape& t, std::span<const Var> v) {
                       return t.sum(
                           t.mul(t.conv2d(v[0], dw, v[1], std::nullopt), t.constant(wd)));
                     }});
  }

  {
    Rng r = rng.derive("pool");
    Tensor wp = randn(r, {2, 3, 2, 2});
    cases.push_back({"maxpool2x2",
                     {randn(r, {2, 3, 4, 4})},
                     [wp](Tape& t, std::span<const Var> v) {
                       return t.sum(t.mul(t.maxpool2x2(v[0]), t.constant(wp)));
                     }});
    Tensor wu = randn(r, {2, 3, 8, 8});
    cases.push_back({"upsample_bilinear_2x",
                     {randn(r, {2, 3, 4, 4})},
                     [wu](Tape& t, std::span<const Var> v) {
                       return t.sum(t.mul(t.upsample_bilinear_2x(v[0]), t.constant(wu)));
                     }});
  }

  {
    // Normalized outputs are nearly invariant to their inputs under a plain
    // sum (the region statistics cancel), which starves finite differences of
    // signal; a random readout keeps every coordinate's gradient at O(1).
    Rng r = rng.derive("norm");
    Tensor wg = randn(r, {2, 4, 3, 3});
    cases.push_back({"group_norm",
                     {randn(r, {2, 4, 3, 3}), rand_nonzero(r, {4}), randn(r, {4})},
                     [wg](Tape& t, std::span<const Var> v) {
                       return t.sum(t.mul(t.group_norm(v[0], 2, v[1], v[2], 1e-5),
                                          t.constant(wg)));
                     }});
    Tensor wl = randn(r, {2, 3, 8});
    cases.push_back({"layer_norm",
                     {randn(r, {2, 3, 8}), rand_nonzero(r, {8}), randn(r, {8})},
                     [wl](Tape& t, std::span<const Var> v) {
                       return t.sum(t.mul(t.layer_norm(v[0], v[1], v[2], 1e-5),
                                          t.constant(wl)));
                     }});
    Tensor rm = randn(r, {3}, 0.3);
    Tensor rv = Tensor::full({3}, 1.2, DType::f64);
    Tensor wb = randn(r, {2, 3, 4, 4});
    cases.push_back({"batch_norm_train",
                     {randn(r, {2, 3, 4, 4}), rand_nonzero(r, {3}), randn(r, {3})},
                     [rm, rv, wb](Tape& t, std::span<const Var> v) {
                       return t.sum(t.mul(t.batch_norm(v[0], v[1], v[2], rm, rv, 1e-5, true),
                                          t.constant(wb)));
                     }});
    cases.push_back({"batch_norm_infer",
                     {randn(r, {2, 3, 4, 4}), rand_nonzero(r, {3}), randn(r, {3})},
                     [rm, rv, wb](Tape& t, std::span<const Var> v) {
                       return t.sum(t.mul(t.batch_norm(v[0], v[1], v[2], rm, rv, 1e-5, false),
                                          t.constant(wb)));
                     }});
  }

  {
    Rng r = rng.derive("act");
    cases.push_back({"silu",
                     {randn(r, {3, 5})},
                     [](Tape& t, std::span<const Var> v) { return t.sum(t.silu(v[0])); }});
    cases.push_back({"sigmoid",
                     {randn(r, {3, 5})},
                     [](Tape& t, std::span<const Var> v) {
                       return t.sum(t.mul(t.sigmoid(v[0]), t.sigmoid(v[0])));
                     }});
    // weighted so the row sums do not collapse to a constant
    cases.push_back({"softmax",
                     {randn(r, {2, 4, 5}), randn(r, {2, 4, 5})},
                     [](Tape& t, std::span<const Var> v) {
                       return t.sum(t.mul(t.softmax(v[0], -1), v[1]));
                     }});
  }

  {
    Rng r = rng.derive("patch");
    cases.push_back({"unfold_patches",
                     {randn(r, {2, 3, 4, 4}), randn(r, {2, 4, 12})},
                     [](Tape& t, std::span<const Var> v) {
                       return t.sum(t.mul(t.unfold_patches(v[0], 2), v[1]));
                     }});
    cases.push_back({"fold_patches",
                     {randn(r, {2, 4, 12}), randn(r, {2, 3, 4, 4})},
                     [](Tape& t, std::span<const Var> v) {
                       return t.sum(t.mul(t.fold_patches(v[0], 2, 3, 4, 4), v[1]));
                     }});
  }

  {
    Rng r = rng.derive("attn");
    nn::AttentionSpec spec{6, 2, 2.0, 1};
    std::vector<Tensor> inputs;
    inputs.push_back(randn(r, {2, 4, 6}, 0.5));                     // tokens
    inputs.push_back(Tensor::full({6}, 1.0, DType::f64));           // ln1 gamma
    inputs.push_back(Tensor::zeros({6}, DType::f64));               // ln1 beta
    inputs.push_back(randn(r, {6, 6}, 0.5));                        // wq
    inputs.push_back(randn(r, {6}, 0.1));                           // bq
    inputs.push_back(randn(r, {6, 6}, 0.5));                        // wk (bias-free)
    inputs.push_back(randn(r, {6, 6}, 0.5));                        // wv
    inputs.push_back(randn(r, {6}, 0.1));                           // bv
    inputs.push_back(randn(r, {6, 6}, 0.5));                        // wo
    inputs.push_back(randn(r, {6}, 0.1));                           // bo
    inputs.push_back(Tensor::full({6}, 1.0, DType::f64));
    inputs.push_back(Tensor::zeros({6}, DType::f64));
    inputs.push_back(randn(r, {6, 12}, 0.5));
    inputs.push_back(randn(r, {12}, 0.1));
    inputs.push_back(randn(r, {12, 6}, 0.5));
    inputs.push_back(randn(r, {6}, 0.1));
    Tensor wout = randn(r, {2, 4, 6});
    cases.push_back({"mhsa_block", std::move(inputs),
                     [spec, wout](Tape& t, std::span<const Var> v) {
                       nn::MhsaLayerVars p;
                       p.ln1_gamma = v[1];
                       p.ln1_beta = v[2];
                       p.wq = v[3];
                       p.bq = v[4];
                       p.wk = v[5];
                       p.wv = v[6];
                       p.bv = v[7];
                       p.wo = v[8];
                       p.bo = v[9];
                       p.ln2_gamma = v[10];
                       p.ln2_beta = v[11];
                       p.w1 = v[12];
                       p.b1 = v[13];
                       p.w2 = v[14];
                       p.b2 = v[15];
                       std::vector<nn::MhsaLayerVars> layers = {p};
                       return t.sum(t.mul(nn::mhsa_block(t, v[0], spec, layers),
                                          t.constant(wout)));
                     }});
  }

  {
    Rng r = rng.derive("loss");
    Tensor y = Tensor::zeros({2, 1, 4, 4}, DType::f64);
    for (std::int64_t i = 0; i < y.numel(); ++i) y.set_flat(i, r.below(2) ? 1.0 : 0.0);
    cases.push_back({"bce_with_logits",
                     {randn(r, {2, 1, 4, 4})},
                     [y](Tape& t, std::span<const Var> v) {
                       return t.bce_with_logits(v[0], t.constant(y));
                     }});
  }

  return cases;
}

}  // namespace

std::vector<OpCheck> gradcheck_battery(std::span<const std::uint64_t> seeds, double step,
                                       double tol) {
  std::vector<OpCheck> results;
  for (std::size_t si = 0; si < seeds.size(); ++si) {
    auto cases = build_cases(seeds[si]);
    if (results.empty()) {
      results.resize(cases.size());
      for (std::size_t i = 0; i < cases.size(); ++i) {
        results[i].op = cases[i].op;
        results[i].pass = true;
      }
    }
    for (std::size_t i = 0; i < cases.size(); ++i) {
      auto report = gradcheck(cases[i].fn, cases[i].inputs, step, tol);
      results[i].max_rel_err = std::max(results[i].max_rel_err, report.max_rel_err);
      results[i].pass = results[i].pass && report.pass;
    }
  }
  return results;
}

}  // namespace lgms::ad
