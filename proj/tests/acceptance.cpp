// Acceptance suite: one criterion per function, one PASS/FAIL line each,
// nonzero exit if anything fails. Individual criteria can be selected by
// number on the command line.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "lgms/analysis.hpp"
#include "lgms/arch.hpp"
#include "lgms/gradcheck_suite.hpp"
#include "lgms/train.hpp"
#include "oracles.hpp"

using namespace lgms;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// --- 1. gradient integrity ---------------------------------------------------

Outcome criterion1() {
  auto seeds = ad::default_gradcheck_seeds();
  auto checks = ad::gradcheck_battery(seeds, 1e-5, 1e-5);
  double worst_op = 0;
  bool ops_pass = true;
  for (const auto& c : checks) {
    worst_op = std::max(worst_op, c.max_rel_err);
    ops_pass &= c.pass;
  }

  arch::ModelConfig cfg;
  cfg.stage_channels = {4, 4, 8, 8, 8};
  cfg.patch_size = 1;
  arch::LgmsNet net(cfg);
  double worst_full = 0;
  bool full_pass = true;
  for (std::uint64_t seed : seeds) {
    arch::ParamStore store;
    Rng rng(seed);
    net.init_params(store, rng, DType::f64);
    Tensor x0 = random_normal(rng, {1, 1, 16, 16}, 0, 1, DType::f64);
    Tensor y = Tensor::zeros({1, 1, 16, 16}, DType::f64);
    for (std::int64_t i = 0; i < y.numel(); ++i) y.set_flat(i, rng.below(2) ? 1.0 : 0.0);

    std::vector<std::string> names;
    std::vector<Tensor> inputs;
    for (const auto& e : store.entries())
      if (e.requires_grad) {
        names.push_back(e.name);
        inputs.push_back(e.tensor);
      }
    inputs.push_back(x0);
    // Inference-mode norms: a single 16x16 input leaves stage 5 at 1x1 where
    // train-mode batch statistics are degenerate; the per-op battery covers
    // train-mode batch norm on healthy shapes.
    auto f = [&](ad::Tape& tape, std::span<const ad::Var> v) {
      arch::Forward ctx(tape, store, false);
      for (std::size_t i = 0; i < names.size(); ++i) ctx.preset(names[i], v[i]);
      return train::seg_loss(tape, net.forward(ctx, v.back()), y);
    };
    auto report = ad::gradcheck(f, inputs, 1e-5, 1e-4, 2, seed);
    worst_full = std::max(worst_full, report.max_rel_err);
    full_pass &= report.pass;
  }
  return {ops_pass && full_pass, "per-op max rel err " + fmt(worst_op) + " (tol 1e-5), full-model " +
                                     fmt(worst_full) + " (tol 1e-4), 3 seeds"};
}

// --- 2. convolution oracle equivalence -----------------------------------------

Outcome criterion2() {
  Rng rng(2024);
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::int64_t g = 1 + rng.below(4);
    nn::ConvSpec spec{g * (1 + rng.below(3)), g * (1 + rng.below(3)),
                      2 * static_cast<int>(rng.below(4)) + 1, static_cast<int>(g),
                      rng.below(2) == 1};
    std::int64_t n = 1 + rng.below(2), h = 1 + rng.below(8), w = 1 + rng.below(8);
    Tensor x = random_normal(rng, {n, spec.in_channels, h, w}, 0, 1, DType::f32);
    Tensor wt = random_normal(rng, spec.weight_shape(), 0, 1, DType::f32);
    Tensor b = random_normal(rng, {spec.out_channels}, 0, 1, DType::f32);
    Tensor got = nn::conv2d(x, spec, wt, spec.has_bias ? &b : nullptr);
    Tensor want = oracle::conv2d_naive(x.astype(DType::f64), spec, wt.astype(DType::f64),
                                       spec.has_bias ? &b : nullptr);
    worst = std::max(worst, oracle::max_rel_diff(got.astype(DType::f64), want));
  }
  return {worst < 1e-5, "50 random cases, max rel err " + fmt(worst) + " (tol 1e-5)"};
}

// --- 3. architecture shape contract --------------------------------------------

Outcome criterion3() {
  Rng rng(33);
  int runs = 0;
  for (int variant = 0; variant < 3; ++variant) {
    arch::ModelConfig cfg;
    cfg.stage_channels.clear();
    for (int s = 0; s < 5; ++s) cfg.stage_channels.push_back(4 + 4 * rng.below(3));
    int base = 1 + 2 * static_cast<int>(rng.below(2));
    cfg.lms_kernels = {base, base + 2, base + 4, base + 6};
    cfg.attention.num_heads = 2;
    cfg.attention.depth = 1 + static_cast<int>(rng.below(2));
    cfg.num_classes = 1 + rng.below(3);
    cfg.patch_size = 2;
    cfg.validate();

    for (std::int64_t n : {1, 2})
      for (std::int64_t c : {1, 3})
        for (std::int64_t hw : {64, 128, 256}) {
          arch::ModelConfig run_cfg = cfg;
          run_cfg.input_channels = c;
          arch::LgmsNet net(run_cfg);
          arch::ParamStore store;
          Rng ir(100 + static_cast<std::uint64_t>(variant));
          net.init_params(store, ir);
          Tensor x = random_normal(rng, {n, c, hw, hw}, 0, 1);
          arch::StageTrace trace;
          Tensor y = net.predict_logits(store, x, &trace);
          if (y.shape() != Shape{n, run_cfg.num_classes, hw, hw})
            return {false, "bad output shape " + shape_str(y.shape())};
          for (int s = 0; s < 5; ++s) {
            const Tensor& act = trace.encoder[static_cast<std::size_t>(s)];
            if (act.dim(2) != hw >> s || act.dim(3) != hw >> s)
              return {false, "stage " + std::to_string(s + 1) + " off the 2^-s schedule"};
          }
          ++runs;
        }
  }
  return {true, std::to_string(runs) + " forwards over 3 random configs, all shapes on schedule"};
}

// --- 4. counter consistency ------------------------------------------------------

Outcome criterion4() {
  Rng rng(44);
  int tested = 0;
  while (tested < 10) {
    arch::ModelConfig cfg;
    cfg.stage_channels.clear();
    for (int s = 0; s < 5; ++s) cfg.stage_channels.push_back(4 * (1 + rng.below(8)));
    int base = 1 + 2 * static_cast<int>(rng.below(3));
    cfg.lms_kernels = {base, base, base + 2, base + 4};
    static const std::vector<arch::TcRatio> ratios = {{1, 0}, {3, 1}, {1, 1}, {1, 3}, {0, 1}};
    cfg.tc_ratio = ratios[static_cast<std::size_t>(rng.below(5))];
    cfg.patch_size = rng.below(2) == 0 ? 1 : 2;
    cfg.gms_expansion = 1 + static_cast<int>(rng.below(3));
    cfg.attention.num_heads = rng.below(2) == 0 ? 2 : 4;
    cfg.attention.depth = 1 + static_cast<int>(rng.below(3));
    cfg.gms_stages = rng.below(2) == 0 ? std::vector<int>{4, 5} : std::vector<int>{5};
    cfg.input_channels = rng.below(2) == 0 ? 1 : 3;
    cfg.num_classes = 1 + rng.below(2);
    try {
      cfg.validate();
    } catch (const std::invalid_argument&) {
      continue;
    }
    ++tested;
    arch::LgmsNet net(cfg);
    arch::ParamStore store;
    Rng ir(4000 + static_cast<std::uint64_t>(tested));
    net.init_params(store, ir);
    auto report = net.count(64, 64);
    if (report.total_params != store.trainable_elements())
      return {false, "config " + std::to_string(tested) + ": counter " +
                         std::to_string(report.total_params) + " != live " +
                         std::to_string(store.trainable_elements())};
  }

  arch::ModelConfig def;  // published-comparison default
  auto report = arch::count_params_flops(def, 256, 256);
  double params_m = static_cast<double>(report.total_params) / 1e6;
  double gflops = static_cast<double>(report.total_flops) / 1e9;
  std::ostringstream note;
  note.precision(3);
  note << "10 random configs exact; default config " << params_m << "M params / " << gflops
       << " GFLOPs vs published 2.32M / 4.89 (informational, stage widths are a reconstruction)";
  return {true, note.str()};
}

// --- 5. ablation mechanics --------------------------------------------------------

Outcome criterion5() {
  Rng data_rng(55);
  auto data = train::synth_dataset(44, 32, data_rng);
  std::vector<train::SegSample> tr(data.begin(), data.begin() + 40);
  std::vector<train::SegSample> va(data.begin() + 40, data.end());
  train::Hyper hyper;
  hyper.lr = 0.01;
  hyper.epochs = 5;  // 40 samples / batch 4 = 10 steps per epoch -> 50 steps
  hyper.batch = 4;
  hyper.seed = 5;

  auto run_variant = [&](arch::ModelConfig cfg) -> std::int64_t {
    cfg.validate();
    auto result = train::train_loop(cfg, tr, va, hyper);
    if (result.state.step != 50)
      throw std::runtime_error("expected 50 steps, ran " + std::to_string(result.state.step));
    return arch::count_params_flops(cfg, 32, 32).total_params;
  };

  std::vector<std::int64_t> kernel_counts;
  for (auto ks : {std::vector<int>{3, 3, 3, 3}, std::vector<int>{5, 5, 5, 5},
                  std::vector<int>{7, 7, 7, 7}, std::vector<int>{9, 9, 9, 9},
                  std::vector<int>{3, 5, 7, 9}}) {
    arch::ModelConfig cfg;
    cfg.stage_channels = {8, 8, 8, 8, 8};
    cfg.lms_kernels = ks;
    kernel_counts.push_back(run_variant(cfg));
  }
  std::vector<std::int64_t> tc_counts;
  for (auto ratio : {arch::TcRatio{1, 0}, arch::TcRatio{3, 1}, arch::TcRatio{1, 1},
                     arch::TcRatio{1, 3}, arch::TcRatio{0, 1}}) {
    arch::ModelConfig cfg;
    cfg.stage_channels = {8, 8, 8, 8, 8};
    cfg.tc_ratio = ratio;
    tc_counts.push_back(run_variant(cfg));
  }
  auto distinct = [](std::vector<std::int64_t> v) {
    std::sort(v.begin(), v.end());
    return std::adjacent_find(v.begin(), v.end()) == v.end();
  };
  bool ok = distinct(kernel_counts) && distinct(tc_counts);
  return {ok, "5 kernel sets + 5 t/c ratios, 50 steps each, all parameter counts distinct"};
}

// --- 6. desk-scale learning --------------------------------------------------------

Outcome criterion6() {
  arch::ModelConfig cfg;
  cfg.stage_channels = {8, 16, 32, 64, 64};
  train::Hyper hyper;
  hyper.seed = 17;
  hyper.epochs = 50;

  Rng data_rng(hyper.seed);
  auto data = train::synth_dataset(400, 64, data_rng.derive("synth"));
  std::vector<train::SegSample> tr(data.begin(), data.begin() + 320);
  std::vector<train::SegSample> va(data.begin() + 320, data.end());

  auto result = train::train_loop(cfg, tr, va, hyper);

  arch::LgmsNet net(cfg);
  double iou_sum = 0, worst_gap = 0;
  for (const auto& s : va) {
    Tensor x = reshape(s.image, {1, 1, 64, 64});
    Tensor logits = net.predict_logits(result.best_params, x);
    auto m = train::metrics(train::binarize_logits(logits), reshape(s.mask, {1, 1, 64, 64}));
    iou_sum += m.iou;
    worst_gap = std::max(worst_gap, 2.0 * m.iou / (1.0 + m.iou) - 1e-9 - m.f1);
  }
  double iou = iou_sum / static_cast<double>(va.size());
  bool ok = iou >= 0.85 && worst_gap <= 0.0;
  return {ok, "held-out IoU " + fmt(iou) + " (need >= 0.85) over " + std::to_string(va.size()) +
                  " samples; per-sample F1 >= 2*IoU/(1+IoU) - 1e-9 " +
                  (worst_gap <= 0.0 ? "holds" : "violated")};
}

// --- 7. global-context smoke test ----------------------------------------------------

Outcome criterion7() {
  const std::int64_t C = 8, H = 32, W = 32;
  arch::ModelConfig cfg;
  cfg.stage_channels = {8, 8, 8, 8, 8};
  Rng rng(77);
  Tensor x = random_normal(rng, {1, C, H, W}, 0, 1, DType::f64);
  Tensor dx = x;
  dx.set_flat((0 * H + H / 2) * W + W / 2, x.at_flat((0 * H + H / 2) * W + W / 2) + 1e-3);

  auto changed_map = [&](const Tensor& a, const Tensor& b, double thresh,
                         std::int64_t& count, std::int64_t& radius) {
    count = 0;
    radius = 0;
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w) {
        double delta = 0;
        for (std::int64_t c = 0; c < C; ++c)
          delta = std::max(delta, std::abs(a.at({0, c, h, w}) - b.at({0, c, h, w})));
        if (delta > thresh) {
          ++count;
          radius = std::max(radius, std::max(std::abs(h - H / 2), std::abs(w - W / 2)));
        }
      }
  };

  // GMS stage: one block, transformer branch mixes every patch
  arch::GmsBlockOp gms("gms", cfg, 4);
  arch::ParamStore gstore;
  Rng gr(78);
  gms.init_params(gstore, gr, DType::f64);
  std::int64_t gms_changed, gms_radius;
  changed_map(gms.eval(gstore, x), gms.eval(gstore, dx), 1e-9, gms_changed, gms_radius);
  double gms_frac = static_cast<double>(gms_changed) / static_cast<double>(H * W);

  // LMS-only stack of equal depth: receptive field stays within
  // sum(k_i div 2) of the perturbed pixel. Group-norm statistics couple every
  // position at the ~1/(group size) level, so the changed set is measured
  // against a relative threshold that sits far above that coupling and far
  // below the direct signal.
  arch::LmsBlockOp lms("lms", C, cfg.lms_kernels);
  arch::ParamStore lstore;
  Rng lr(79);
  lms.init_params(lstore, lr, DType::f64);
  Tensor ly = lms.eval(lstore, x);
  Tensor lyd = lms.eval(lstore, dx);
  double peak = 0;
  for (std::int64_t i = 0; i < ly.numel(); ++i)
    peak = std::max(peak, std::abs(ly.at_flat(i) - lyd.at_flat(i)));
  std::int64_t lms_changed, lms_radius;
  changed_map(ly, lyd, 1e-2 * peak, lms_changed, lms_radius);
  std::int64_t bound = 0;
  for (int k : cfg.lms_kernels) bound += k / 2;

  bool ok = gms_frac >= 0.99 && lms_radius <= bound;
  return {ok, "GMS changed " + fmt(100.0 * gms_frac) + "% of positions (need >= 99%); LMS radius " +
                  std::to_string(lms_radius) + " <= bound " + std::to_string(bound)};
}

// --- 8. analysis self-consistency ------------------------------------------------------

Outcome criterion8() {
  // constructed features
  Tensor rank1 = Tensor::zeros({6, 4, 4});
  Rng rng(88);
  Tensor row = random_normal(rng, {16}, 0, 1);
  for (std::int64_t c = 0; c < 6; ++c)
    for (std::int64_t i = 0; i < 16; ++i)
      rank1.set_flat(c * 16 + i, (1.0 + static_cast<double>(c)) * row.at_flat(i));
  if (analysis::channel_redundancy(rank1) != 1) return {false, "rank-1 feature did not count 1"};
  Tensor ortho = Tensor::zeros({4, 4, 4});
  for (std::int64_t c = 0; c < 4; ++c) ortho.set_flat(c * 16 + c, 1.0);
  if (analysis::channel_redundancy(ortho) != 4)
    return {false, "orthogonal channels did not count C"};

  // trained vs untrained end-to-end report
  arch::ModelConfig cfg;
  cfg.stage_channels = {4, 4, 8, 8, 8};
  arch::LgmsNet net(cfg);
  Rng dr(89);
  auto data = train::synth_dataset(10, 32, dr);
  std::vector<train::SegSample> tr(data.begin(), data.begin() + 8);
  std::vector<train::SegSample> va(data.begin() + 8, data.end());
  train::Hyper hyper;
  hyper.lr = 0.01;
  hyper.epochs = 4;
  hyper.batch = 4;
  hyper.seed = 9;
  auto trained = train::train_loop(cfg, tr, va, hyper);
  arch::ParamStore untrained;
  Rng ir(90);
  net.init_params(untrained, ir);

  auto dir = fs::temp_directory_path() / "lgms_acceptance_analysis";
  fs::create_directories(dir);
  for (auto& [tag, store] : std::vector<std::pair<std::string, arch::ParamStore*>>{
           {"trained", &trained.state.params}, {"untrained", &untrained}}) {
    analysis::RedundancyReport rep;
    rep.layer = "stage4";
    for (const auto& s : data) {
      Tensor x = reshape(s.image, {1, 1, 32, 32});
      arch::StageTrace trace;
      net.predict_logits(*store, x, &trace);
      Tensor act = reshape(trace.encoder[3], {trace.encoder[3].dim(1), trace.encoder[3].dim(2),
                                              trace.encoder[3].dim(3)});
      std::int64_t count = analysis::channel_redundancy(act);
      std::int64_t cap = std::min(act.dim(0), act.dim(1) * act.dim(2));
      if (count < 1 || count > cap)
        return {false, tag + " count " + std::to_string(count) + " outside [1, " +
                           std::to_string(cap) + "]"};
      rep.rows.push_back({s.id, count});
    }
    auto path = (dir / (tag + ".csv")).string();
    analysis::write_redundancy_csv(rep, path);
    std::ifstream f(path);
    std::string header;
    std::getline(f, header);
    if (header != "sample_id,layer,count") return {false, "bad CSV header"};
    int lines = 0;
    for (std::string line; std::getline(f, line);) ++lines;
    if (lines != static_cast<int>(data.size())) return {false, "CSV row count mismatch"};
  }
  fs::remove_all(dir);
  return {true, "rank-1 -> 1, orthogonal -> C; trained and untrained reports emit valid CSV"};
}

// --- 9. loss identities -------------------------------------------------------------------

Outcome criterion9() {
  Tensor y = Tensor::from_f64({1, 1, 2, 2}, {1, 0, 1, 0});
  Tensor z = Tensor::zeros({1, 1, 2, 2}, DType::f64);
  for (int i = 0; i < 4; ++i) z.set_flat(i, y.at_flat(i) == 1.0 ? 40.0 : -40.0);
  ad::Tape t1;
  double saturated = train::seg_loss(t1, t1.constant(z), y).value().item();
  if (!(saturated < 1e-6)) return {false, "saturated loss " + fmt(saturated) + " >= 1e-6"};

  // logits 0, half foreground: the weighted BCE term is 0.5 * ln 2
  Tensor y2 = Tensor::from_f64({1, 1, 1, 2}, {1, 0});
  Tensor z2 = Tensor::zeros({1, 1, 1, 2}, DType::f64);
  ad::Tape t2;
  double total = train::seg_loss(t2, t2.constant(z2), y2).value().item();
  double dice = 1.0 - (2.0 * 0.5 + 1.0) / (1.0 + 1.0 + 1.0);
  double bce_term = total - dice;
  if (std::abs(bce_term - 0.5 * std::log(2.0)) > 1e-6)
    return {false, "BCE term " + fmt(bce_term) + " != 0.5 ln 2"};

  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor p = Tensor::zeros({1, 6, 6});
    Tensor g = Tensor::zeros({1, 6, 6});
    for (std::int64_t i = 0; i < 36; ++i) {
      p.set_flat(i, rng.below(3) == 0 ? 1.0 : 0.0);
      g.set_flat(i, rng.below(3) == 0 ? 1.0 : 0.0);
    }
    auto c = train::overlap_counts(p, g);
    if (c.unions() + c.inter != c.pred + c.gt)  // the set identity, exact in integers
      return {false, "set identity violated at trial " + std::to_string(trial)};
    auto m = train::metrics(p, g);
    if (std::abs(m.f1 - 2.0 * m.iou / (1.0 + m.iou)) > 1e-9)
      return {false, "float identity drift at trial " + std::to_string(trial)};
  }
  return {true, "saturated < 1e-6; BCE term = 0.5 ln 2 within 1e-6; F1/IoU identity exact on "
                "1000 random mask pairs"};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> fn;
  };
  std::vector<Criterion> criteria = {
      {1, "gradient integrity", 120, criterion1},
      {2, "convolution oracle equivalence", 30, criterion2},
      {3, "architecture shape contract", 60, criterion3},
      {4, "counter consistency", 60, criterion4},
      {5, "ablation mechanics", 300, criterion5},
      {6, "desk-scale learning", 900, criterion6},
      {7, "global-context smoke test", 60, criterion7},
      {8, "analysis self-consistency", 60, criterion8},
      {9, "loss identities", 60, criterion9},
  };

  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));

  bool all_pass = true;
  for (const auto& c : criteria) {
    if (!selected.empty() &&
        std::find(selected.begin(), selected.end(), c.id) == selected.end())
      continue;
    auto t0 = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
      outcome = c.fn();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    double secs = seconds_since(t0);
    bool in_budget = secs < c.budget_s;
    bool pass = outcome.pass && in_budget;
    all_pass &= pass;
    std::printf("[%s] criterion %d: %s — %s (%.1fs, budget %.0fs)\n", pass ? "PASS" : "FAIL",
                c.id, c.name, outcome.detail.c_str(), secs, c.budget_s);
    std::fflush(stdout);
  }
  return all_pass ? 0 : 1;
}
