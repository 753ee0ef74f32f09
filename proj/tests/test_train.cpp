#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "lgms/train.hpp"
#include "oracles.hpp"

using namespace lgms;
using train::SegSample;

namespace {

arch::ModelConfig micro_config() {
  arch::ModelConfig cfg;
  cfg.stage_channels = {4, 4, 8, 8, 8};
  cfg.patch_size = 2;
  return cfg;
}

std::multiset<float> pixel_multiset(const Tensor& t) {
  std::multiset<float> m;
  for (std::int64_t i = 0; i < t.numel(); ++i) m.insert(static_cast<float>(t.at_flat(i)));
  return m;
}

}  // namespace

TEST_CASE("seg_loss saturates to zero on a confident perfect prediction") {
  Tensor y = Tensor::from_f64({1, 1, 2, 2}, {1, 0, 1, 0});
  Tensor z = Tensor::zeros({1, 1, 2, 2}, DType::f64);
  for (int i = 0; i < 4; ++i) z.set_flat(i, y.at_flat(i) == 1.0 ? 40.0 : -40.0);
  ad::Tape tape;
  double loss = train::seg_loss(tape, tape.constant(z), y).value().item();
  CHECK(loss >= 0.0);
  CHECK(loss < 1e-6);
}

TEST_CASE("seg_loss on the uniform-0.5 two-pixel field matches the scalar oracle") {
  // logits 0 everywhere, half the pixels foreground: BCE = ln 2, and
  // Dice = 1 - (2*0.5 + 1) / (1 + 1 + 1) = 1/3
  Tensor y = Tensor::from_f64({1, 1, 1, 2}, {1, 0});
  Tensor z = Tensor::zeros({1, 1, 1, 2}, DType::f64);
  ad::Tape tape;
  double loss = train::seg_loss(tape, tape.constant(z), y).value().item();
  double bce = std::log(2.0);
  CHECK(std::abs(bce - 0.693147) < 1e-6);
  double expected = 0.5 * bce + (1.0 - 2.0 / 3.0);
  CHECK(loss == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("seg_loss contract violations") {
  ad::Tape tape;
  Tensor z = Tensor::zeros({1, 1, 2, 2}, DType::f64);
  Tensor wrong_shape = Tensor::zeros({1, 1, 2, 3}, DType::f64);
  CHECK_THROWS_AS(train::seg_loss(tape, tape.constant(z), wrong_shape), std::invalid_argument);
  Tensor not_binary = Tensor::full({1, 1, 2, 2}, 0.5, DType::f64);
  CHECK_THROWS_AS(train::seg_loss(tape, tape.constant(z), not_binary), std::invalid_argument);
}

TEST_CASE("seg_loss stays in range on random inputs") {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    Tensor z = random_normal(rng, {1, 1, 4, 4}, 0, 5, DType::f64);
    Tensor y = Tensor::zeros({1, 1, 4, 4}, DType::f64);
    for (std::int64_t i = 0; i < 16; ++i) y.set_flat(i, rng.below(2) ? 1.0 : 0.0);
    ad::Tape tape;
    double loss = train::seg_loss(tape, tape.constant(z), y).value().item();
    CHECK(loss >= 0.0);
    CHECK(std::isfinite(loss));
  }
}

TEST_CASE("metrics on the worked overlap example") {
  // |P| = 4, |G| = 4, overlap 2 -> IoU = 2/6, F1 = 4/8
  Tensor p = Tensor::from_f32({1, 1, 3, 3}, {1, 1, 1, 1, 0, 0, 0, 0, 0});
  Tensor g = Tensor::from_f32({1, 1, 3, 3}, {1, 1, 0, 0, 0, 1, 0, 1, 0});
  auto r = train::metrics(p, g);
  CHECK(r.iou == doctest::Approx(2.0 / 6.0).epsilon(1e-12));
  CHECK(r.f1 == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("metrics conventions: perfect and empty cases") {
  Tensor ones = Tensor::full({1, 4, 4}, 1.0);
  auto perfect = train::metrics(ones, ones);
  CHECK(perfect.iou == 1.0);
  CHECK(perfect.f1 == 1.0);

  Tensor zeros = Tensor::zeros({1, 4, 4});
  auto empty = train::metrics(zeros, zeros);
  CHECK(empty.iou == 1.0);
  CHECK(empty.f1 == 1.0);

  CHECK_THROWS_AS(train::metrics(ones, Tensor::zeros({1, 2, 2})), std::invalid_argument);
}

TEST_CASE("F1 equals 2*IoU/(1+IoU) via the exact set identity") {
  Rng rng(17);
  for (int t = 0; t < 200; ++t) {
    Tensor p = Tensor::zeros({1, 8, 8});
    Tensor g = Tensor::zeros({1, 8, 8});
    for (std::int64_t i = 0; i < 64; ++i) {
      p.set_flat(i, rng.below(3) == 0 ? 1.0 : 0.0);
      g.set_flat(i, rng.below(3) == 0 ? 1.0 : 0.0);
    }
    auto c = train::overlap_counts(p, g);
    CHECK(c.unions() + c.inter == c.pred + c.gt);  // exact in integers
    auto r = train::metrics(p, g);
    CHECK(std::abs(r.f1 - 2.0 * r.iou / (1.0 + r.iou)) < 1e-9);
  }
}

TEST_CASE("binarize thresholds at logit zero") {
  Tensor z = Tensor::from_f32({4}, {-0.1f, 0.0f, 0.1f, -100.0f});
  Tensor b = train::binarize_logits(z);
  CHECK(b.at_flat(0) == 0.0);
  CHECK(b.at_flat(1) == 1.0);  // sigmoid(0) = 0.5 counts as foreground
  CHECK(b.at_flat(2) == 1.0);
  CHECK(b.at_flat(3) == 0.0);
}

TEST_CASE("augment: 180 degrees twice is the identity") {
  Rng xr(5);
  SegSample s;
  s.image = random_normal(xr, {1, 6, 6}, 0, 1);
  s.mask = Tensor::zeros({1, 6, 6});
  s.id = "a";
  // draw until both augmentations are the 180-degree case
  auto rot180 = [&](const SegSample& in) {
    for (std::uint64_t seed = 0;; ++seed) {
      Rng probe(seed);
      if (probe.below(4) == 2 && probe.below(2) == 0 && probe.below(2) == 0) {
        Rng r(seed);
        return train::augment(in, r);
      }
    }
  };
  SegSample once = rot180(s);
  SegSample twice = rot180(once);
  CHECK(oracle::bit_equal(twice.image, s.image));
}

TEST_CASE("augment preserves the pixel multiset and mask binarity") {
  Rng xr(6);
  SegSample s;
  s.image = random_normal(xr, {1, 8, 8}, 0, 1);
  s.mask = Tensor::zeros({1, 8, 8});
  for (std::int64_t i = 0; i < 64; ++i) s.mask.set_flat(i, xr.below(2) ? 1.0 : 0.0);
  s.id = "b";
  double fg = sum_value(s.mask);
  for (std::uint64_t seed = 0; seed < 16; ++seed) {
    Rng r(seed);
    SegSample a = train::augment(s, r);
    CHECK(pixel_multiset(a.image) == pixel_multiset(s.image));
    CHECK(sum_value(a.mask) == fg);
    for (std::int64_t i = 0; i < a.mask.numel(); ++i) {
      double v = a.mask.at_flat(i);
      CHECK((v == 0.0 || v == 1.0));
    }
  }
}

TEST_CASE("augment determinism and the non-square rotation error") {
  Rng xr(7);
  SegSample s;
  s.image = random_normal(xr, {1, 4, 4}, 0, 1);
  s.mask = Tensor::zeros({1, 4, 4});
  s.id = "c";
  Rng r1(99), r2(99);
  SegSample a1 = train::augment(s, r1);
  SegSample a2 = train::augment(s, r2);
  CHECK(oracle::bit_equal(a1.image, a2.image));
  CHECK(oracle::bit_equal(a1.mask, a2.mask));

  SegSample rect;
  rect.image = random_normal(xr, {1, 4, 6}, 0, 1);
  rect.mask = Tensor::zeros({1, 4, 6});
  rect.id = "d";
  bool threw = false;
  for (std::uint64_t seed = 0; seed < 64 && !threw; ++seed) {
    Rng r(seed);
    try {
      train::augment(rect, r);
    } catch (const std::invalid_argument&) {
      threw = true;  // a 90/270 draw rejected the rectangle
    }
  }
  CHECK(threw);
}

TEST_CASE("synthetic dataset contract") {
  Rng rng(11);
  auto data = train::synth_dataset(100, 64, rng);
  REQUIRE(data.size() == 100);
  for (const auto& s : data) {
    CHECK(s.image.shape() == Shape{1, 64, 64});
    CHECK(s.mask.shape() == Shape{1, 64, 64});
    CHECK(s.image.all_finite());
    double fg = 0;
    for (std::int64_t i = 0; i < s.mask.numel(); ++i) {
      double v = s.mask.at_flat(i);
      CHECK((v == 0.0 || v == 1.0));
      fg += v;
      CHECK(s.image.at_flat(i) >= 0.0);
      CHECK(s.image.at_flat(i) <= 1.0);
    }
    double ratio = fg / 4096.0;
    CHECK(ratio >= 0.02);
    CHECK(ratio <= 0.6);
  }

  // byte-identical regeneration under the same seed
  Rng rng2(11);
  auto again = train::synth_dataset(100, 64, rng2);
  for (std::size_t i = 0; i < 100; ++i) {
    CHECK(oracle::bit_equal(again[i].image, data[i].image));
    CHECK(oracle::bit_equal(again[i].mask, data[i].mask));
    CHECK(again[i].id == data[i].id);
  }
  CHECK_THROWS_AS(train::synth_dataset(2, 60, rng), std::invalid_argument);
}

TEST_CASE("synthetic foreground/background contrast and ratio spread") {
  Rng rng(13);
  auto data = train::synth_dataset(500, 32, rng);
  double lo = 1.0, hi = 0.0;
  for (const auto& s : data) {
    double fg_sum = 0, bg_sum = 0, fg_n = 0, bg_n = 0;
    for (std::int64_t i = 0; i < s.mask.numel(); ++i) {
      if (s.mask.at_flat(i) != 0.0) {
        fg_sum += s.image.at_flat(i);
        fg_n += 1;
      } else {
        bg_sum += s.image.at_flat(i);
        bg_n += 1;
      }
    }
    CHECK(std::abs(fg_sum / fg_n - bg_sum / bg_n) >= 0.2);
    double ratio = fg_n / static_cast<double>(s.mask.numel());
    lo = std::min(lo, ratio);
    hi = std::max(hi, ratio);
  }
  CHECK(lo <= 0.05);
  CHECK(hi >= 0.5);
}

TEST_CASE("cosine schedule endpoints") {
  CHECK(train::cosine_lr(0.02, 0, 2000) == doctest::Approx(0.02));
  CHECK(train::cosine_lr(0.02, 1999, 2000) < 1e-4 * 0.02);
  CHECK(train::cosine_lr(0.02, 1000, 2000) == doctest::Approx(0.01));
}

TEST_CASE("sgd with lr=0 leaves parameters bit-identical") {
  arch::ModelConfig cfg = micro_config();
  arch::LgmsNet net(cfg);
  train::TrainState state;
  Rng rng(21);
  net.init_params(state.params, rng);
  std::unordered_map<std::string, Tensor> grads;
  for (const auto& e : state.params.entries())
    if (e.requires_grad) grads.emplace(e.name, Tensor::full(e.tensor.shape(), 0.37f));
  arch::ParamStore before = state.params;
  train::sgd_step(state, grads, 0.0, 0.9, 1e-4);
  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK(oracle::bit_equal(before.entries()[i].tensor, state.params.entries()[i].tensor));
  CHECK(state.step == 1);
}

TEST_CASE("sgd matches a hand-computed momentum update") {
  train::TrainState state;
  state.params.add("w", Tensor::from_f64({2}, {1.0, -2.0}), true);
  std::unordered_map<std::string, Tensor> grads;
  grads.emplace("w", Tensor::from_f64({2}, {0.5, 0.25}));
  train::sgd_step(state, grads, 0.1, 0.9, 0.0);
  // v = g; w -= 0.1 * v
  CHECK(state.params.at("w").at_flat(0) == doctest::Approx(0.95));
  CHECK(state.params.at("w").at_flat(1) == doctest::Approx(-2.025));
  train::sgd_step(state, grads, 0.1, 0.9, 0.0);
  // v = 0.9*g + g = 0.95, 0.475
  CHECK(state.params.at("w").at_flat(0) == doctest::Approx(0.95 - 0.095));
  CHECK(state.params.at("w").at_flat(1) == doctest::Approx(-2.025 - 0.0475));
}

TEST_CASE("one small step on a single sample decreases its loss") {
  arch::ModelConfig cfg = micro_config();
  arch::LgmsNet net(cfg);
  train::TrainState state;
  Rng rng(31);
  net.init_params(state.params, rng);
  Rng dr(32);
  auto data = train::synth_dataset(1, 32, dr);
  Tensor x = reshape(data[0].image, {1, 1, 32, 32});
  Tensor y = reshape(data[0].mask, {1, 1, 32, 32});

  auto loss_at = [&](bool step) {
    ad::Tape tape;
    arch::Forward ctx(tape, state.params, true);
    ad::Var out = net.forward(ctx, tape.constant(x));
    ad::Var loss = train::seg_loss(tape, out, y);
    double lv = loss.value().item();
    if (step) {
      auto grads = ctx.named_grads(tape.backward(loss));
      train::sgd_step(state, grads, 1e-3, 0.0, 0.0);
      ctx.commit_stats();
    }
    return lv;
  };
  double before = loss_at(true);
  double after = loss_at(false);
  CHECK(after < before);
}

TEST_CASE("train_loop runs, traces, and reproduces bit-identically") {
  arch::ModelConfig cfg = micro_config();
  Rng dr(41);
  auto data = train::synth_dataset(12, 32, dr);
  std::vector<SegSample> tr(data.begin(), data.begin() + 8);
  std::vector<SegSample> va(data.begin() + 8, data.end());
  train::Hyper hyper;
  hyper.lr = 0.01;
  hyper.epochs = 2;
  hyper.batch = 4;
  hyper.seed = 7;

  auto r1 = train::train_loop(cfg, tr, va, hyper);
  auto r2 = train::train_loop(cfg, tr, va, hyper);
  REQUIRE(r1.trace.size() == r2.trace.size());
  for (std::size_t i = 0; i < r1.trace.size(); ++i) {
    CHECK(r1.trace[i].loss == r2.trace[i].loss);
    CHECK(r1.trace[i].iou == r2.trace[i].iou);
    CHECK(r1.trace[i].f1 == r2.trace[i].f1);
  }
  CHECK(r1.state.step == 2 * 2);  // 8 samples, batch 4, drop-last
  CHECK(r1.best_epoch >= 0);
  REQUIRE(r1.trace.size() == 4);  // train + val per epoch
  CHECK(r1.trace[0].split == "train");
  CHECK(r1.trace[1].split == "val");

  // best checkpoint equals the final-params run only if the last epoch won;
  // either way the snapshot must be internally consistent
  arch::LgmsNet net(cfg);
  auto report = train::evaluate(net, r1.best_params, va, 4);
  CHECK(report.iou == doctest::Approx(r1.best_iou));
}

TEST_CASE("non-finite loss aborts with the step index") {
  arch::ModelConfig cfg = micro_config();
  Rng dr(51);
  auto data = train::synth_dataset(4, 32, dr);
  std::vector<SegSample> tr(data.begin(), data.end());
  train::Hyper hyper;
  hyper.lr = 1e18;  // guaranteed blow-up
  hyper.epochs = 3;
  hyper.batch = 2;
  hyper.seed = 1;
  CHECK_THROWS_WITH_AS(train::train_loop(cfg, tr, {}, hyper), doctest::Contains("step"),
                       std::runtime_error);
}

TEST_CASE("PNM round trip and dataset directory io") {
  namespace fs = std::filesystem;
  Rng rng(61);
  auto dir = fs::temp_directory_path() / "lgms_test_ds";
  fs::remove_all(dir);
  auto data = train::synth_dataset(3, 32, rng);
  train::save_dataset_dir(data, dir.string());
  auto back = train::load_dataset_dir(dir.string());
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].id == data[i].id);
    CHECK(oracle::bit_equal(back[i].mask, data[i].mask));  // masks survive exactly
    // images are 8-bit quantized; half-step of 1/255 is the worst case
    CHECK(oracle::max_abs_diff(back[i].image, data[i].image) <= 0.5 / 255.0 + 1e-7);
  }
  auto resized = train::load_dataset_dir(dir.string(), 16);
  CHECK(resized[0].image.shape() == Shape{1, 16, 16});
  CHECK(resized[0].mask.shape() == Shape{1, 16, 16});
  for (std::int64_t i = 0; i < resized[0].mask.numel(); ++i) {
    double v = resized[0].mask.at_flat(i);
    CHECK((v == 0.0 || v == 1.0));
  }
  fs::remove_all(dir);
}

TEST_CASE("trace CSV format") {
  namespace fs = std::filesystem;
  auto path = fs::temp_directory_path() / "lgms_trace.csv";
  std::vector<train::TraceRow> rows = {{0, "train", 0.5, 0.25, 0.4}, {0, "val", 0.6, 0.2, 1.0 / 3.0}};
  train::write_trace_csv(rows, path.string());
  std::ifstream f(path);
  std::string line;
  std::getline(f, line);
  CHECK(line == "epoch,split,loss,iou,f1");
  std::getline(f, line);
  CHECK(line.substr(0, 8) == "0,train,");
  fs::remove(path);
}
