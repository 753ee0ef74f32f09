#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "lgms/arch.hpp"
#include "lgms/train.hpp"
#include "oracles.hpp"

using namespace lgms;
using arch::Forward;
using arch::LgmsNet;
using arch::ModelConfig;
using arch::ParamStore;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.stage_channels = {8, 8, 16, 16, 32};
  cfg.input_channels = 1;
  cfg.num_classes = 1;
  return cfg;
}

Tensor delta_kernels(std::int64_t channels, int k) {
  Tensor w = Tensor::zeros({channels, 1, k, k});
  for (std::int64_t c = 0; c < channels; ++c)
    w.set_flat((c * k + k / 2) * k + k / 2, 1.0);
  return w;
}

}  // namespace

TEST_CASE("LMS block parameter count matches the per-layer enumeration") {
  arch::LmsBlockOp block("lms", 16, {3, 5, 7, 9});
  // depthwise 4*(4*k^2) = 656; GN affine 32; 1x1 16->4 no bias 64; BN affine 8;
  // 3x3 4->16 with bias 592
  CHECK(block.param_count() == 656 + 32 + 64 + 8 + 592);
  CHECK(block.param_count() == 1352);

  ParamStore store;
  Rng rng(1);
  block.init_params(store, rng);
  CHECK(store.trainable_elements() == 1352);
}

TEST_CASE("LMS block is shape preserving and channel preserving") {
  arch::LmsBlockOp block("lms", 16, {3, 5, 7, 9});
  ParamStore store;
  Rng rng(2);
  block.init_params(store, rng);
  Rng xr(3);
  Tensor x = random_normal(xr, {2, 16, 32, 32}, 0, 1);
  Tensor y = block.eval(store, x);
  CHECK(y.shape() == x.shape());
  CHECK(y.all_finite());
  CHECK_THROWS_AS(arch::LmsBlockOp("bad", 18, {3, 5, 7, 9}), std::invalid_argument);
}

TEST_CASE("LMS block composes exactly as split/dw/GN/SiLU/residual/bottleneck/restore") {
  const std::int64_t C = 8;
  arch::LmsBlockOp block("lms", C, {3, 5, 7, 9});
  ParamStore store;
  Rng rng(7);
  block.init_params(store, rng);
  // delta depthwise kernels make the multiscale stage an identity, so the
  // Eq-style intermediate is exactly SiLU(GN(x)) + x
  std::array<int, 4> ks = {3, 5, 7, 9};
  for (int i = 0; i < 4; ++i)
    store.set("lms.dw" + std::to_string(i) + ".w", delta_kernels(C / 4, ks[static_cast<std::size_t>(i)]));

  Rng xr(8);
  Tensor x = random_normal(xr, {2, C, 6, 6}, 0, 1);
  Tensor got = block.eval(store, x);

  auto gn = nn::group_norm(x, 4, store.at("lms.gn.gamma"), store.at("lms.gn.beta"), 1e-5);
  Tensor inter = add(nn::silu(gn.y), x);
  nn::ConvSpec squeeze{C, C / 4, 1, 1, false};
  Tensor b = nn::conv2d(inter, squeeze, store.at("lms.squeeze.w"), nullptr);
  auto bn = nn::batch_norm(b, store.at("lms.bn.gamma"), store.at("lms.bn.beta"),
                           store.at("lms.bn.running_mean"), store.at("lms.bn.running_var"),
                           1e-5, false);
  nn::ConvSpec restore{C / 4, C, 3, 1, true};
  Tensor bias = store.at("lms.restore.b");
  Tensor want = nn::conv2d(nn::silu(bn.y), restore, store.at("lms.restore.w"), &bias);
  CHECK(oracle::bit_equal(got, want));
}

TEST_CASE("GMS split arithmetic at the published 3:1 ratio") {
  ModelConfig cfg = tiny_config();
  cfg.stage_channels = {8, 8, 16, 32, 32};  // expansion 2 at stage 4 gives E = 64
  CHECK(cfg.expanded_channels(4) == 64);
  CHECK(cfg.transformer_channels(4) == 48);
  CHECK(cfg.conv_branch_channels(4) == 16);
  CHECK(cfg.token_dim(4) == 192);  // 48 * 2 * 2

  arch::GmsBlockOp block("gms", cfg, 4);
  ParamStore store;
  Rng rng(4);
  block.init_params(store, rng);
  Rng xr(5);
  Tensor x = random_normal(xr, {1, 32, 16, 16}, 0, 1);
  Tensor y = block.eval(store, x);
  CHECK(y.shape() == x.shape());
  CHECK(y.all_finite());
  // 16x16 with p=2 -> 64 tokens of dimension 192, reflected in the attention widths
  CHECK(store.at("gms.attn.l0.wq").shape() == Shape{192, 192});
  CHECK(store.trainable_elements() == block.param_count());
}

TEST_CASE("GMS pure-conv and pure-transformer splits degrade gracefully") {
  ModelConfig cfg = tiny_config();
  for (auto [t, c] : {std::pair{0, 1}, std::pair{1, 0}}) {
    cfg.tc_ratio = {t, c};
    arch::GmsBlockOp block("gms", cfg, 5);
    ParamStore store;
    Rng rng(6);
    block.init_params(store, rng);
    Rng xr(7);
    Tensor x = random_normal(xr, {1, 32, 8, 8}, 0, 1);
    CHECK(block.eval(store, x).shape() == x.shape());
    CHECK(store.trainable_elements() == block.param_count());
  }
}

TEST_CASE("fusion block shape contract and analytic count") {
  arch::FusionBlockOp fuse("f", 16, 16, 16);
  // per-source 3x3 convs: 2 * 16*16*9; BN over 32; 1x1 32->16; BN over 16
  CHECK(fuse.param_count() == 2304 + 2304 + 64 + 512 + 32);
  ParamStore store;
  Rng rng(9);
  fuse.init_params(store, rng);
  CHECK(store.trainable_elements() == fuse.param_count());

  Rng xr(10);
  Tensor enc = random_normal(xr, {1, 16, 8, 8}, 0, 1);
  Tensor dec = random_normal(xr, {1, 16, 8, 8}, 0, 1);
  Tensor y = fuse.eval(store, enc, dec);
  CHECK(y.shape() == Shape{1, 16, 8, 8});

  // encoder information passes through a zero decoder input
  Tensor zero = Tensor::zeros({1, 16, 8, 8});
  Tensor alone = fuse.eval(store, enc, zero);
  CHECK(sum_value(mul(alone, alone)) > 1e-6);

  Tensor bad = Tensor::zeros({1, 16, 4, 4});
  ad::Tape tape;
  Forward ctx(tape, store, false);
  CHECK_THROWS_WITH_AS(fuse.forward(ctx, tape.constant(enc), tape.constant(bad)),
                       doctest::Contains("spatial"), std::invalid_argument);
}

TEST_CASE("fusion block supports unequal source widths") {
  arch::FusionBlockOp fuse("f", 16, 32, 16);
  ParamStore store;
  Rng rng(11);
  fuse.init_params(store, rng);
  Rng xr(12);
  Tensor enc = random_normal(xr, {2, 16, 8, 8}, 0, 1);
  Tensor dec = random_normal(xr, {2, 32, 8, 8}, 0, 1);
  CHECK(fuse.eval(store, enc, dec).shape() == Shape{2, 16, 8, 8});
}

TEST_CASE("full network forward keeps the input resolution and class count") {
  ModelConfig cfg = tiny_config();
  LgmsNet net(cfg);
  ParamStore store;
  Rng rng(20);
  net.init_params(store, rng);

  Tensor x = random_normal(rng, {2, 1, 64, 64}, 0, 1);
  arch::StageTrace trace;
  Tensor y = net.predict_logits(store, x, &trace);
  CHECK(y.shape() == Shape{2, 1, 64, 64});

  // per-stage activations follow the 2^-s downsampling schedule
  for (int s = 0; s < 5; ++s) {
    const Tensor& act = trace.encoder[static_cast<std::size_t>(s)];
    CHECK(act.dim(2) == 64 >> s);
    CHECK(act.dim(3) == 64 >> s);
    CHECK(act.dim(1) == cfg.stage_channels[static_cast<std::size_t>(s)]);
  }

  CHECK_THROWS_AS(net.predict_logits(store, Tensor::zeros({1, 1, 60, 64})),
                  std::invalid_argument);
  CHECK_THROWS_AS(net.predict_logits(store, Tensor::zeros({1, 3, 64, 64})),
                  std::invalid_argument);
}

TEST_CASE("forward passes are deterministic for a fixed store") {
  ModelConfig cfg = tiny_config();
  LgmsNet net(cfg);
  ParamStore s1, s2;
  Rng r1(33), r2(33);
  net.init_params(s1, r1);
  net.init_params(s2, r2);
  Rng xr(34);
  Tensor x = random_normal(xr, {1, 1, 32, 32}, 0, 1);
  CHECK(oracle::bit_equal(net.predict_logits(s1, x), net.predict_logits(s2, x)));
}

TEST_CASE("counter equals live trainable element count across random configs") {
  Rng rng(55);
  int tested = 0;
  while (tested < 10) {
    ModelConfig cfg;
    cfg.stage_channels.clear();
    for (int s = 0; s < 5; ++s) cfg.stage_channels.push_back(4 * (1 + rng.below(6)));
    int base = 1 + 2 * static_cast<int>(rng.below(3));
    cfg.lms_kernels = {base, base + 2, base + 2, base + 4};
    static const std::vector<arch::TcRatio> ratios = {{1, 0}, {3, 1}, {1, 1}, {1, 3}, {0, 1}};
    cfg.tc_ratio = ratios[static_cast<std::size_t>(rng.below(5))];
    cfg.patch_size = rng.below(2) == 0 ? 1 : 2;
    cfg.gms_expansion = 1 + static_cast<int>(rng.below(3));
    cfg.attention.num_heads = rng.below(2) == 0 ? 2 : 4;
    cfg.attention.depth = 1 + static_cast<int>(rng.below(2));
    cfg.gms_stages = rng.below(2) == 0 ? std::vector<int>{4, 5} : std::vector<int>{3, 4, 5};
    cfg.input_channels = rng.below(2) == 0 ? 1 : 3;
    cfg.num_classes = 1 + rng.below(2);
    try {
      cfg.validate();
    } catch (const std::invalid_argument&) {
      continue;  // draw again; invariants reject this combination
    }
    ++tested;
    LgmsNet net(cfg);
    ParamStore store;
    Rng ir(1000 + static_cast<std::uint64_t>(tested));
    net.init_params(store, ir);
    auto report = net.count(64, 64);
    CHECK(report.total_params == store.trainable_elements());
    std::int64_t item_sum = 0;
    for (const auto& item : report.items) item_sum += item.params;
    CHECK(item_sum == report.total_params);
  }
}

TEST_CASE("flop counter on hand-checked convolution examples") {
  // 1x1 conv 8->16 at 4x4 with bias: params 144, FLOPs 2*(8*16*16) + 256
  arch::FusionBlockOp dummy("x", 8, 8, 8);  // unrelated; direct spec check below
  ModelConfig cfg = tiny_config();
  LgmsNet net(cfg);
  auto report = net.count(64, 64);
  CHECK(report.total_flops > 0);

  // head is a 1x1 conv w1 -> classes with bias at full resolution
  const auto& head = report.items.back();
  CHECK(head.name == "head");
  std::int64_t w1 = cfg.stage_channels[0];
  CHECK(head.params == w1 * 1 + 1);
  CHECK(head.flops == 2 * (64 * 64 * w1) + 64 * 64);
}

TEST_CASE("LGCK checkpoint round trip restores every tensor bit-exactly") {
  ModelConfig cfg = tiny_config();
  LgmsNet net(cfg);
  ParamStore a, b;
  Rng r1(77), r2(78);
  net.init_params(a, r1);
  net.init_params(b, r2);  // different values, same structure

  auto tmp = std::filesystem::temp_directory_path() / "lgms_test_ckpt.lgck";
  a.save_lgck(tmp.string());
  b.load_lgck(tmp.string());
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.entries()[i].name == b.entries()[i].name);
    CHECK(oracle::bit_equal(a.entries()[i].tensor, b.entries()[i].tensor));
  }

  // structural mismatch is rejected
  ModelConfig other = tiny_config();
  other.stage_channels = {8, 8, 16, 16, 16};
  ParamStore c;
  Rng r3(79);
  LgmsNet(other).init_params(c, r3);
  CHECK_THROWS_AS(c.load_lgck(tmp.string()), std::runtime_error);
  std::filesystem::remove(tmp);
}

TEST_CASE("model config JSON round trip and field-path errors") {
  ModelConfig cfg = tiny_config();
  cfg.tc_ratio = {1, 3};
  cfg.patch_size = 1;
  cfg.gms_stages = {3, 4, 5};
  ModelConfig back = ModelConfig::from_json(cfg.to_json());
  CHECK(back.stage_channels == cfg.stage_channels);
  CHECK(back.lms_kernels == cfg.lms_kernels);
  CHECK(back.tc_ratio.t == 1);
  CHECK(back.tc_ratio.c == 3);
  CHECK(back.patch_size == 1);
  CHECK(back.gms_stages == cfg.gms_stages);

  ModelConfig bad = tiny_config();
  bad.stage_channels[1] = 9;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("stage_channels[1]"),
                       std::invalid_argument);
  ModelConfig kerr = tiny_config();
  kerr.lms_kernels = {3, 5, 4, 9};
  CHECK_THROWS_WITH_AS(kerr.validate(), doctest::Contains("lms_kernels[2]"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(ModelConfig::from_json(nlohmann::json{{"bogus", 1}}),
                       doctest::Contains("bogus"), std::invalid_argument);
}

TEST_CASE("parameter names are unique and deterministic") {
  ModelConfig cfg = tiny_config();
  LgmsNet net(cfg);
  ParamStore a, b;
  Rng r1(5), r2(5);
  net.init_params(a, r1);
  net.init_params(b, r2);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.entries()[i].name == b.entries()[i].name);
    CHECK(oracle::bit_equal(a.entries()[i].tensor, b.entries()[i].tensor));
  }
  CHECK_THROWS_AS(a.add(a.entries()[0].name, Tensor::zeros({1}), true), std::invalid_argument);
}

TEST_CASE("full tiny model gradcheck through the segmentation loss") {
  ModelConfig cfg;
  cfg.stage_channels = {4, 4, 8, 8, 8};
  cfg.patch_size = 1;  // stage 5 sits at 1x1 for a 16x16 input
  cfg.validate();
  LgmsNet net(cfg);
  ParamStore store;
  Rng rng(131);
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

  // Inference-mode normalization: with a single 16x16 input, stage 5 sits at
  // 1x1 where train-mode batch statistics are degenerate (zero variance puts
  // every downstream norm exactly on its epsilon singularity). Train-mode
  // batch norm gradients are covered by the op battery on healthy shapes.
  auto f = [&](ad::Tape& tape, std::span<const ad::Var> v) {
    Forward ctx(tape, store, false);
    for (std::size_t i = 0; i < names.size(); ++i) ctx.preset(names[i], v[i]);
    ad::Var logits = net.forward(ctx, v.back());
    return train::seg_loss(tape, logits, y);
  };
  auto report = ad::gradcheck(f, inputs, 1e-5, 1e-4, 2, 29);
  INFO("max rel err ", report.max_rel_err);
  CHECK(report.pass);
}
