#include "lgms/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace lgms::train {

namespace fs = std::filesystem;
using ad::Tape;
using ad::Var;

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

bool is_binary(const Tensor& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    double v = t.at_flat(i);
    if (v != 0.0 && v != 1.0) return false;
  }
  return true;
}

}  // namespace

// --- loss ------------------------------------------------------------------------

Var seg_loss(Tape& tape, Var logits, const Tensor& target) {
  const Tensor& z = logits.value();
  require(z.shape() == target.shape(), "seg_loss shapes differ: " + shape_str(z.shape()) +
                                           " vs " + shape_str(target.shape()));
  require(is_binary(target), "seg_loss target must be strictly binary");
  DType dt = z.dtype();
  Var y = tape.constant(target.astype(dt));
  Var bce = tape.bce_with_logits(logits, y);
  Var p = tape.sigmoid(logits);
  Var one = tape.scalar_const(1.0, dt);
  Var num = tape.add(tape.mul(tape.sum(tape.mul(p, y)), tape.scalar_const(2.0, dt)), one);
  Var den = tape.add(tape.add(tape.sum(p), tape.scalar_const(sum_value(target), dt)), one);
  Var dice = tape.sub(one, tape.div(num, den));
  return tape.add(tape.mul(bce, tape.scalar_const(0.5, dt)), dice);
}

// --- metrics ---------------------------------------------------------------------

OverlapCounts overlap_counts(const Tensor& pred_mask, const Tensor& gt_mask) {
  require(pred_mask.shape() == gt_mask.shape(),
          "metrics shapes differ: " + shape_str(pred_mask.shape()) + " vs " +
              shape_str(gt_mask.shape()));
  OverlapCounts c;
  for (std::int64_t i = 0; i < pred_mask.numel(); ++i) {
    bool p = pred_mask.at_flat(i) != 0.0;
    bool g = gt_mask.at_flat(i) != 0.0;
    c.pred += p;
    c.gt += g;
    c.inter += p && g;
  }
  return c;
}

MetricReport metrics(const Tensor& pred_mask, const Tensor& gt_mask) {
  require(is_binary(pred_mask) && is_binary(gt_mask), "metrics inputs must be binary");
  OverlapCounts c = overlap_counts(pred_mask, gt_mask);
  MetricReport r;
  r.samples = 1;
  // Both-empty convention: perfect agreement.
  r.iou = c.unions() == 0 ? 1.0 : static_cast<double>(c.inter) / static_cast<double>(c.unions());
  r.f1 = (c.pred + c.gt) == 0
             ? 1.0
             : 2.0 * static_cast<double>(c.inter) / static_cast<double>(c.pred + c.gt);
  return r;
}

Tensor binarize_logits(const Tensor& logits) {
  Tensor out = Tensor::zeros(logits.shape(), logits.dtype());
  for (std::int64_t i = 0; i < logits.numel(); ++i)
    out.set_flat(i, logits.at_flat(i) >= 0.0 ? 1.0 : 0.0);
  return out;
}

// --- augmentation ------------------------------------------------------------------

namespace {

Tensor rotate90(const Tensor& chw, int quarter_turns) {
  int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return chw;
  const std::int64_t C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  Shape os = (k % 2 == 0) ? Shape{C, H, W} : Shape{C, W, H};
  Tensor out = Tensor::zeros(os, chw.dtype());
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w) {
        double v = chw.at_flat((c * H + h) * W + w);
        std::int64_t oh, ow;
        switch (k) {  // counterclockwise quarter turns
          case 1: oh = W - 1 - w; ow = h; break;
          case 2: oh = H - 1 - h; ow = W - 1 - w; break;
          default: oh = w; ow = H - 1 - h; break;
        }
        out.set_flat((c * os[1] + oh) * os[2] + ow, v);
      }
  return out;
}

Tensor flip(const Tensor& chw, bool horizontal, bool vertical) {
  if (!horizontal && !vertical) return chw;
  const std::int64_t C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  Tensor out = Tensor::zeros(chw.shape(), chw.dtype());
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w) {
        std::int64_t sh = vertical ? H - 1 - h : h;
        std::int64_t sw = horizontal ? W - 1 - w : w;
        out.set_flat((c * H + h) * W + w, chw.at_flat((c * H + sh) * W + sw));
      }
  return out;
}

}  // namespace

SegSample augment(const SegSample& sample, Rng& rng) {
  int quarter = static_cast<int>(rng.below(4));
  bool hflip = rng.below(2) == 1;
  bool vflip = rng.below(2) == 1;
  if (quarter % 2 == 1 && sample.image.dim(1) != sample.image.dim(2))
    throw std::invalid_argument("augment: 90/270 degree rotation requires a square input, got " +
                                shape_str(sample.image.shape()));
  SegSample out;
  out.id = sample.id;
  out.image = flip(rotate90(sample.image, quarter), hflip, vflip);
  out.mask = flip(rotate90(sample.mask, quarter), hflip, vflip);
  return out;
}

// --- synthetic data -----------------------------------------------------------------

namespace {

struct Ellipse {
  double cx, cy, a, b, cos_t, sin_t;
  bool contains(double x, double y) const {
    double dx = x - cx, dy = y - cy;
    double u = (dx * cos_t + dy * sin_t) / a;
    double v = (-dx * sin_t + dy * cos_t) / b;
    return u * u + v * v <= 1.0;
  }
};

SegSample synth_sample(std::int64_t size, Rng rng, const std::string& id) {
  const double total = static_cast<double>(size * size);
  Tensor image, mask;
  for (int attempt = 0;; ++attempt) {
    if (attempt > 64) throw std::runtime_error("synth_dataset failed to place foreground");
    double target_ratio = rng.uniform(0.03, 0.58);
    int blobs = target_ratio > 0.4 ? 1 : 1 + static_cast<int>(rng.below(3));
    std::vector<Ellipse> shapes;
    for (int bi = 0; bi < blobs; ++bi) {
      double area = target_ratio * total / blobs;
      double aspect = rng.uniform(0.5, 2.0);
      double a = std::sqrt(area * aspect / kPi);
      double b = area / (kPi * a);
      double lo = target_ratio > 0.4 ? 0.4 : 0.2;
      double hi = 1.0 - lo;
      double theta = rng.uniform(0.0, kPi);
      shapes.push_back({rng.uniform(lo, hi) * static_cast<double>(size),
                        rng.uniform(lo, hi) * static_cast<double>(size), a, b,
                        std::cos(theta), std::sin(theta)});
    }
    mask = Tensor::zeros({1, size, size}, DType::f32);
    std::int64_t fg = 0;
    for (std::int64_t y = 0; y < size; ++y)
      for (std::int64_t x = 0; x < size; ++x) {
        double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        for (const Ellipse& e : shapes)
          if (e.contains(px, py)) {
            mask.set_flat(y * size + x, 1.0);
            ++fg;
            break;
          }
      }
    double ratio = static_cast<double>(fg) / total;
    if (ratio < 0.02 || ratio > 0.6) continue;

    double bg_base = rng.uniform(0.15, 0.45);
    double delta = rng.uniform(0.25, 0.45);
    double fg_base = rng.below(2) == 0 ? bg_base + delta : std::max(0.02, bg_base - delta);
    // two low-frequency gratings for texture
    double fx1 = rng.uniform(0.5, 2.5), fy1 = rng.uniform(0.5, 2.5), ph1 = rng.uniform(0, 2 * kPi);
    double fx2 = rng.uniform(2.0, 5.0), fy2 = rng.uniform(2.0, 5.0), ph2 = rng.uniform(0, 2 * kPi);
    image = Tensor::zeros({1, size, size}, DType::f32);
    double fg_sum = 0, bg_sum = 0;
    for (std::int64_t y = 0; y < size; ++y)
      for (std::int64_t x = 0; x < size; ++x) {
        double u = static_cast<double>(x) / static_cast<double>(size);
        double v = static_cast<double>(y) / static_cast<double>(size);
        double tex = 0.04 * std::cos(2 * kPi * (fx1 * u + fy1 * v) + ph1) +
                     0.03 * std::cos(2 * kPi * (fx2 * u + fy2 * v) + ph2);
        double noise = 0.03 * rng.normal();
        bool is_fg = mask.at_flat(y * size + x) != 0.0;
        double val = (is_fg ? fg_base : bg_base) + tex + noise;
        val = std::clamp(val, 0.0, 1.0);
        image.set_flat(y * size + x, val);
        (is_fg ? fg_sum : bg_sum) += val;
      }
    double fg_mean = fg_sum / static_cast<double>(fg);
    double bg_mean = bg_sum / (total - static_cast<double>(fg));
    if (std::abs(fg_mean - bg_mean) < 0.2) continue;
    break;
  }
  return SegSample{std::move(image), std::move(mask), id};
}

}  // namespace

std::vector<SegSample> synth_dataset(int n, std::int64_t size, const Rng& rng) {
  require(n >= 0, "synth_dataset: n must be >= 0");
  require(size > 0 && size % 16 == 0,
          "synth_dataset: size must be a positive multiple of 16, got " + std::to_string(size));
  std::vector<SegSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "synth-%05d", i);
    out.push_back(synth_sample(size, rng.derive(std::string("sample/") + id), id));
  }
  return out;
}

// --- PNM files -----------------------------------------------------------------------

Tensor read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P5" && magic != "P6") throw std::runtime_error(path + ": not a P5/P6 file");
  auto next_int = [&]() {
    // skip whitespace and '#' comments
    for (;;) {
      int ch = f.peek();
      if (ch == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(ch)) {
        f.get();
      } else {
        break;
      }
    }
    std::int64_t v;
    f >> v;
    return v;
  };
  std::int64_t w = next_int(), h = next_int(), maxval = next_int();
  if (!f || w <= 0 || h <= 0) throw std::runtime_error(path + ": bad PNM header");
  if (maxval != 255) throw std::runtime_error(path + ": only maxval 255 is supported");
  f.get();  // single whitespace after maxval
  std::int64_t c = magic == "P5" ? 1 : 3;
  std::vector<unsigned char> raw(static_cast<std::size_t>(w * h * c));
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw std::runtime_error(path + ": truncated pixel data");
  Tensor t = Tensor::zeros({c, h, w}, DType::f32);
  auto d = t.mutable_data<float>();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t ch = 0; ch < c; ++ch)
        d[static_cast<std::size_t>((ch * h + y) * w + x)] =
            static_cast<float>(raw[static_cast<std::size_t>((y * w + x) * c + ch)]) / 255.0f;
  return t;
}

void write_pnm(const Tensor& chw, const std::string& path) {
  require(chw.rank() == 3 && (chw.dim(0) == 1 || chw.dim(0) == 3),
          "write_pnm expects (1,H,W) or (3,H,W), got " + shape_str(chw.shape()));
  const std::int64_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << (c == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> raw(static_cast<std::size_t>(w * h * c));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double v = std::clamp(chw.at_flat((ch * h + y) * w + x), 0.0, 1.0);
        raw[static_cast<std::size_t>((y * w + x) * c + ch)] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
  f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw std::runtime_error("failed writing " + path);
}

std::vector<SegSample> load_dataset_dir(const std::string& dir, std::int64_t resize_to) {
  if (!fs::is_directory(dir)) throw std::runtime_error(dir + " is not a directory");
  std::map<std::string, std::string> images;  // id -> image path, sorted by id
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::string name = entry.path().filename().string();
    for (const char* suffix : {".img.pgm", ".img.ppm"}) {
      if (name.size() > std::strlen(suffix) &&
          name.compare(name.size() - std::strlen(suffix), std::string::npos, suffix) == 0)
        images[name.substr(0, name.size() - std::strlen(suffix))] = entry.path().string();
    }
  }
  if (images.empty()) throw std::runtime_error("no *.img.pgm|ppm files under " + dir);
  std::vector<SegSample> out;
  for (const auto& [id, img_path] : images) {
    std::string mask_path = (fs::path(dir) / (id + ".mask.pgm")).string();
    if (!fs::exists(mask_path)) throw std::runtime_error("missing mask for sample " + id);
    SegSample s;
    s.id = id;
    s.image = read_pnm(img_path);
    s.mask = read_pnm(mask_path);
    for (std::int64_t i = 0; i < s.mask.numel(); ++i) {
      double v = s.mask.at_flat(i);
      if (v != 0.0 && v != 1.0)
        throw std::runtime_error("mask for sample " + id + " is not strictly 0/255");
    }
    if (resize_to > 0 && (s.image.dim(1) != resize_to || s.image.dim(2) != resize_to)) {
      s.image = nn::resize_bilinear(s.image, resize_to, resize_to);
      s.mask = nn::resize_nearest(s.mask, resize_to, resize_to);  // keeps the mask binary
    }
    out.push_back(std::move(s));
  }
  return out;
}

void save_dataset_dir(std::span<const SegSample> samples, const std::string& dir) {
  fs::create_directories(dir);
  for (const SegSample& s : samples) {
    const char* img_suffix = s.image.dim(0) == 3 ? ".img.ppm" : ".img.pgm";
    write_pnm(s.image, (fs::path(dir) / (s.id + img_suffix)).string());
    write_pnm(s.mask, (fs::path(dir) / (s.id + ".mask.pgm")).string());
  }
}

// --- optimizer / loop -----------------------------------------------------------------

double cosine_lr(double base, std::int64_t step, std::int64_t total) {
  if (total <= 0) return base;
  double frac = static_cast<double>(step) / static_cast<double>(total);
  return base * 0.5 * (1.0 + std::cos(kPi * frac));
}

void sgd_step(TrainState& state, const std::unordered_map<std::string, Tensor>& grads,
              double lr, double mu, double weight_decay) {
  for (const auto& entry : state.params.entries()) {
    if (!entry.requires_grad) continue;
    auto git = grads.find(entry.name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    const Tensor& theta = entry.tensor;
    auto vit = state.momentum.find(entry.name);
    if (vit == state.momentum.end())
      vit = state.momentum.emplace(entry.name, Tensor::zeros(theta.shape(), theta.dtype())).first;
    Tensor v = add(mul(vit->second, Tensor::scalar(mu, theta.dtype())),
                   add(g, mul(theta, Tensor::scalar(weight_decay, theta.dtype()))));
    vit->second = v;
    state.params.set(entry.name, sub(theta, mul(v, Tensor::scalar(lr, theta.dtype()))));
  }
  state.step++;
}

void write_trace_csv(std::span<const TraceRow> rows, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << "epoch,split,loss,iou,f1\n";
  for (const TraceRow& r : rows) {
    std::ostringstream line;
    line.precision(9);
    line << r.epoch << ',' << r.split << ',' << r.loss << ',' << r.iou << ',' << r.f1;
    f << line.str() << "\n";
  }
}

namespace {

Tensor stack_batch(std::span<const SegSample> samples, std::span<const std::size_t> idx,
                   bool masks) {
  const Tensor& first = masks ? samples[idx[0]].mask : samples[idx[0]].image;
  Shape shape = {static_cast<std::int64_t>(idx.size()), first.dim(0), first.dim(1),
                 first.dim(2)};
  Tensor out = Tensor::zeros(shape, DType::f32);
  auto dst = out.mutable_data<float>();
  std::int64_t per = first.numel();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Tensor& t = masks ? samples[idx[b]].mask : samples[idx[b]].image;
    require(t.shape() == first.shape(), "batch samples disagree in shape");
    auto src = t.data<float>();
    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return out;
}

}  // namespace

MetricReport evaluate(const arch::LgmsNet& net, arch::ParamStore& params,
                      std::span<const SegSample> data, int batch) {
  MetricReport r;
  if (data.empty()) return r;
  double loss_sum = 0, iou_sum = 0, f1_sum = 0;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(batch)) {
    idx.clear();
    for (std::size_t j = i; j < std::min(data.size(), i + static_cast<std::size_t>(batch)); ++j)
      idx.push_back(j);
    Tensor x = stack_batch(data, idx, false);
    Tensor y = stack_batch(data, idx, true);
    Tape tape;
    arch::Forward ctx(tape, params, false);
    Var logits = net.forward(ctx, tape.constant(x));
    auto per = lgms::split(logits.value(), 0, Shape(idx.size(), 1));
    auto gt = lgms::split(y, 0, Shape(idx.size(), 1));
    for (std::size_t b = 0; b < idx.size(); ++b) {
      Tape ltape;
      double l = seg_loss(ltape, ltape.constant(per[b]), gt[b]).value().item();
      MetricReport m = metrics(binarize_logits(per[b]), gt[b]);
      loss_sum += l;
      iou_sum += m.iou;
      f1_sum += m.f1;
    }
  }
  double n = static_cast<double>(data.size());
  r.loss = loss_sum / n;
  r.iou = iou_sum / n;
  r.f1 = f1_sum / n;
  r.samples = static_cast<std::int64_t>(data.size());
  return r;
}

TrainResult train_loop(const arch::ModelConfig& cfg, std::span<const SegSample> train_set,
                       std::span<const SegSample> val_set, const Hyper& hyper) {
  cfg.validate();
  require(!train_set.empty(), "train_loop: empty training set");
  require(hyper.batch >= 1 && hyper.epochs >= 1, "train_loop: batch and epochs must be >= 1");

  arch::LgmsNet net(cfg);
  Rng base(hyper.seed);
  TrainResult result;
  {
    Rng init_rng = base.derive("init");
    net.init_params(result.state.params, init_rng);
  }

  const std::int64_t steps_per_epoch =
      static_cast<std::int64_t>(train_set.size()) / hyper.batch;  // drop-last
  require(steps_per_epoch > 0, "train_loop: batch size exceeds the training set");
  const std::int64_t total_steps = steps_per_epoch * hyper.epochs;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    // deterministic shuffle, derived from (seed, epoch) only
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng = base.derive("shuffle/e" + std::to_string(epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.below(
                                  static_cast<std::int64_t>(i)))]);

    double train_loss = 0, train_iou = 0, train_f1 = 0;
    std::int64_t seen = 0;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<SegSample> batch;
      std::vector<std::size_t> bidx;
      for (int b = 0; b < hyper.batch; ++b) {
        std::size_t di = order[static_cast<std::size_t>(s) * hyper.batch + b];
        Rng aug_rng = base.derive("aug/e" + std::to_string(epoch) + "/i" + std::to_string(di));
        batch.push_back(augment(train_set[di], aug_rng));
        bidx.push_back(static_cast<std::size_t>(b));
      }
      Tensor x = stack_batch(batch, bidx, false);
      Tensor y = stack_batch(batch, bidx, true);

      Tape tape;
      arch::Forward ctx(tape, result.state.params, true);
      Var logits = net.forward(ctx, tape.constant(x));
      Var loss = seg_loss(tape, logits, y);
      double lv = loss.value().item();
      if (!std::isfinite(lv))
        throw std::runtime_error("non-finite loss at step " +
                                 std::to_string(result.state.step));
      double lr = cosine_lr(hyper.lr, result.state.step, total_steps);
      auto grads = ctx.named_grads(tape.backward(loss));
      sgd_step(result.state, grads, lr, hyper.momentum, hyper.weight_decay);
      ctx.commit_stats();

      MetricReport m = metrics(binarize_logits(logits.value()), y);
      train_loss += lv;
      train_iou += m.iou;
      train_f1 += m.f1;
      ++seen;
    }

    result.trace.push_back({epoch, "train", train_loss / static_cast<double>(seen),
                            train_iou / static_cast<double>(seen),
                            train_f1 / static_cast<double>(seen)});
    if (!val_set.empty()) {
      MetricReport vm = evaluate(net, result.state.params, val_set, hyper.batch);
      result.trace.push_back({epoch, "val", vm.loss, vm.iou, vm.f1});
      if (vm.iou > result.best_iou) {
        result.best_iou = vm.iou;
        result.best_epoch = epoch;
        result.best_params = result.state.params;
      }
    }
  }
  if (result.best_epoch < 0) result.best_params = result.state.params;
  return result;
}

}  // namespace lgms::train
