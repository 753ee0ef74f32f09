#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lgms/arch.hpp"
#include "lgms/autograd.hpp"
#include "lgms/tensor.hpp"

namespace lgms::train {

struct SegSample {
  Tensor image;  // (C, H, W), values in [0, 1]
  Tensor mask;   // (1, H, W), values in {0, 1}
  std::string id;
};

// 0.5 * BCE(sigmoid(logits), y) + DiceLoss(sigmoid(logits), y), smooth 1.
// BCE runs in the stable logit form. Throws if shapes differ or y is not
// strictly binary.
ad::Var seg_loss(ad::Tape& tape, ad::Var logits, const Tensor& target);

struct MetricReport {
  double iou = 0.0;
  double f1 = 0.0;
  double loss = 0.0;
  std::int64_t samples = 0;
};

struct OverlapCounts {
  std::int64_t inter = 0;
  std::int64_t pred = 0;
  std::int64_t gt = 0;
  std::int64_t unions() const { return pred + gt - inter; }
};

OverlapCounts overlap_counts(const Tensor& pred_mask, const Tensor& gt_mask);

// IoU = |P∩G| / |P∪G|, F1 = 2|P∩G| / (|P|+|G|); both 1 when prediction and
// ground truth are empty.
MetricReport metrics(const Tensor& pred_mask, const Tensor& gt_mask);

// sigmoid(logit) >= 0.5, i.e. logit >= 0.
Tensor binarize_logits(const Tensor& logits);

// Uniform rotation in {0, 90, 180, 270} degrees plus independent
// horizontal/vertical flips, applied identically to image and mask.
// 90/270 require a square input.
SegSample augment(const SegSample& sample, Rng& rng);

// Blobby foreground (1-3 filled ellipses) over a textured noisy background;
// foreground/background mean intensities differ by at least 0.2 and the
// foreground area ratio lands in [0.02, 0.6]. Per-sample streams derive from
// the rng seed, so equal seeds give byte-identical datasets.
std::vector<SegSample> synth_dataset(int n, std::int64_t size, const Rng& rng);

// --- dataset files -------------------------------------------------------------
//
// Samples on disk are `<id>.img.pgm` (P5) or `<id>.img.ppm` (P6) plus
// `<id>.mask.pgm` (P5, strictly 0/255), all maxval 255.
Tensor read_pnm(const std::string& path);
void write_pnm(const Tensor& chw, const std::string& path);  // picks P5/P6 by channel count
std::vector<SegSample> load_dataset_dir(const std::string& dir, std::int64_t resize_to = 0);
void save_dataset_dir(std::span<const SegSample> samples, const std::string& dir);

// --- training loop -------------------------------------------------------------

struct Hyper {
  double lr = 0.02;
  int epochs = 50;
  int batch = 8;
  std::uint64_t seed = 0;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

// Cosine decay from `base` at step 0 towards 0 over `total` steps.
double cosine_lr(double base, std::int64_t step, std::int64_t total);

struct TrainState {
  std::int64_t step = 0;
  arch::ParamStore params;
  std::unordered_map<std::string, Tensor> momentum;  // one slot per trainable tensor
};

// SGD with momentum and decoupled-from-schedule weight decay:
// v <- mu*v + g + wd*theta; theta <- theta - lr*v.
void sgd_step(TrainState& state, const std::unordered_map<std::string, Tensor>& grads,
              double lr, double mu, double weight_decay);

struct TraceRow {
  int epoch = 0;
  std::string split;
  double loss = 0.0;
  double iou = 0.0;
  double f1 = 0.0;
};

void write_trace_csv(std::span<const TraceRow> rows, const std::string& path);

struct TrainResult {
  TrainState state;              // final parameters and optimizer slots
  arch::ParamStore best_params;  // highest validation IoU snapshot
  int best_epoch = -1;
  double best_iou = -1.0;
  std::vector<TraceRow> trace;
};

MetricReport evaluate(const arch::LgmsNet& net, arch::ParamStore& params,
                      std::span<const SegSample> data, int batch);

// Full loop: shuffled mini-batches (drop-last), per-epoch validation, best
// checkpoint retention. Augmentation and shuffling draw from streams derived
// from (seed, epoch, index) only. Throws on non-finite loss, naming the step.
TrainResult train_loop(const arch::ModelConfig& cfg, std::span<const SegSample> train_set,
                       std::span<const SegSample> val_set, const Hyper& hyper);

}  // namespace lgms::train
