#include "lgms/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lgms::analysis {

namespace {

constexpr double kJacobiTol = 1e-10;
constexpr int kMaxSweeps = 100;

// One-sided Jacobi over column pairs of a (rows x cols) column-major working
// copy with rows >= cols: rotate until all columns are mutually orthogonal,
// then the singular values are the column norms.
std::vector<double> jacobi_column_svd(std::vector<double>& a, std::int64_t rows,
                                      std::int64_t cols) {
  auto col = [&](std::int64_t j) { return a.data() + j * rows; };
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::int64_t p = 0; p < cols - 1; ++p) {
      for (std::int64_t q = p + 1; q < cols; ++q) {
        double* cp = col(p);
        double* cq = col(q);
        double app = 0, aqq = 0, apq = 0;
        for (std::int64_t i = 0; i < rows; ++i) {
          app += cp[i] * cp[i];
          aqq += cq[i] * cq[i];
          apq += cp[i] * cq[i];
        }
        if (std::abs(apq) <= kJacobiTol * std::sqrt(app * aqq) || apq == 0.0) continue;
        rotated = true;
        double zeta = (aqq - app) / (2.0 * apq);
        double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = c * t;
        for (std::int64_t i = 0; i < rows; ++i) {
          double vp = cp[i], vq = cq[i];
          cp[i] = c * vp - s * vq;
          cq[i] = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }
  std::vector<double> sv(static_cast<std::size_t>(cols));
  for (std::int64_t j = 0; j < cols; ++j) {
    double norm = 0;
    const double* cj = col(j);
    for (std::int64_t i = 0; i < rows; ++i) norm += cj[i] * cj[i];
    sv[static_cast<std::size_t>(j)] = std::sqrt(norm);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

}  // namespace

std::vector<double> singular_values(const Tensor& matrix) {
  if (matrix.rank() != 2)
    throw std::invalid_argument("singular_values expects a rank-2 tensor, got " +
                                shape_str(matrix.shape()));
  std::int64_t r = matrix.dim(0), c = matrix.dim(1);
  // Work on the taller orientation; singular values are transpose-invariant.
  std::int64_t rows = std::max(r, c), cols = std::min(r, c);
  std::vector<double> a(static_cast<std::size_t>(rows * cols));
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) {
      double v = matrix.at_flat(i * c + j);
      if (r >= c)
        a[static_cast<std::size_t>(j * rows + i)] = v;  // column-major
      else
        a[static_cast<std::size_t>(i * rows + j)] = v;  // transposed
    }
  return jacobi_column_svd(a, rows, cols);
}

std::int64_t channel_redundancy(const Tensor& feature_chw, double tau) {
  if (feature_chw.rank() != 3)
    throw std::invalid_argument("channel_redundancy expects (C,H,W), got " +
                                shape_str(feature_chw.shape()));
  if (tau <= 0.0 || tau >= 1.0)
    throw std::invalid_argument("channel_redundancy tau must lie in (0, 1)");
  const std::int64_t c = feature_chw.dim(0);
  const std::int64_t hw = feature_chw.dim(1) * feature_chw.dim(2);
  auto sv = singular_values(reshape(feature_chw, {c, hw}));
  if (sv.empty() || sv[0] == 0.0) return 0;  // all-zero feature map
  double cutoff = tau * sv[0];
  std::int64_t count = 0;
  for (double s : sv)
    if (s > cutoff) ++count;
  return count;
}

ScaleDensity fg_scale_density(std::span<const Tensor> masks) {
  ScaleDensity d;
  d.ratios.reserve(masks.size());
  for (const Tensor& m : masks) {
    std::int64_t fg = 0;
    for (std::int64_t i = 0; i < m.numel(); ++i) {
      double v = m.at_flat(i);
      if (v != 0.0 && v != 1.0)
        throw std::invalid_argument("fg_scale_density masks must be binary");
      fg += v != 0.0;
    }
    double ratio = static_cast<double>(fg) / static_cast<double>(m.numel());
    d.ratios.push_back(ratio);
    auto bin = static_cast<std::size_t>(std::min(49.0, ratio * 50.0));
    d.bins[bin]++;
  }
  return d;
}

double fg_bg_singular_ratio(const Tensor& feature_chw, const Tensor& mask_1hw) {
  if (feature_chw.rank() != 3 || mask_1hw.rank() != 3 || mask_1hw.dim(0) != 1)
    throw std::invalid_argument("fg_bg_singular_ratio expects feature (C,H,W), mask (1,h,w)");
  const std::int64_t c = feature_chw.dim(0), h = feature_chw.dim(1), w = feature_chw.dim(2);
  Tensor mask = (mask_1hw.dim(1) == h && mask_1hw.dim(2) == w)
                    ? mask_1hw
                    : nn::resize_nearest(mask_1hw, h, w);
  std::vector<std::int64_t> fg_cols, bg_cols;
  for (std::int64_t i = 0; i < h * w; ++i)
    (mask.at_flat(i) != 0.0 ? fg_cols : bg_cols).push_back(i);
  if (fg_cols.empty()) throw std::invalid_argument("fg_bg_singular_ratio: empty foreground");
  if (bg_cols.empty()) throw std::invalid_argument("fg_bg_singular_ratio: empty background");

  auto top_sv = [&](const std::vector<std::int64_t>& cols) {
    Tensor sub = Tensor::zeros({c, static_cast<std::int64_t>(cols.size())}, DType::f64);
    for (std::int64_t ci = 0; ci < c; ++ci)
      for (std::size_t j = 0; j < cols.size(); ++j)
        sub.set_flat(ci * static_cast<std::int64_t>(cols.size()) + static_cast<std::int64_t>(j),
                     feature_chw.at_flat(ci * h * w + cols[j]));
    auto sv = singular_values(sub);
    // normalized by sqrt(column count) so region size does not dominate
    return sv[0] / std::sqrt(static_cast<double>(cols.size()));
  };
  return top_sv(fg_cols) / top_sv(bg_cols);
}

void export_features(const arch::LgmsNet& net, arch::ParamStore& params,
                     const train::SegSample& sample, int stage, const std::string& prefix) {
  if (stage < 1 || stage > 5)
    throw std::invalid_argument("export stage must lie in [1, 5], got " + std::to_string(stage));
  Tensor x = reshape(sample.image, {1, sample.image.dim(0), sample.image.dim(1),
                                    sample.image.dim(2)});
  arch::StageTrace trace;
  net.predict_logits(params, x, &trace);
  const Tensor& act4 = trace.encoder[static_cast<std::size_t>(stage - 1)];
  Tensor act = reshape(act4, {act4.dim(1), act4.dim(2), act4.dim(3)});
  write_lgts(act, prefix + ".lgts");

  // channel-mean image, min-max normalized for inspection
  const std::int64_t c = act.dim(0), h = act.dim(1), w = act.dim(2);
  Tensor mean = Tensor::zeros({1, h, w}, DType::f32);
  for (std::int64_t i = 0; i < h * w; ++i) {
    double acc = 0;
    for (std::int64_t ci = 0; ci < c; ++ci) acc += act.at_flat(ci * h * w + i);
    mean.set_flat(i, acc / static_cast<double>(c));
  }
  double lo = mean.at_flat(0), hi = mean.at_flat(0);
  for (std::int64_t i = 0; i < h * w; ++i) {
    lo = std::min(lo, mean.at_flat(i));
    hi = std::max(hi, mean.at_flat(i));
  }
  double span = hi > lo ? hi - lo : 1.0;
  for (std::int64_t i = 0; i < h * w; ++i) mean.set_flat(i, (mean.at_flat(i) - lo) / span);
  train::write_pnm(mean, prefix + ".pgm");
}

namespace {

std::ofstream open_csv(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.precision(9);
  return f;
}

}  // namespace

void write_redundancy_csv(const RedundancyReport& report, const std::string& path) {
  auto f = open_csv(path);
  f << "sample_id,layer,count\n";
  for (const auto& r : report.rows) f << r.sample_id << ',' << report.layer << ',' << r.count << "\n";
}

void write_scale_csv(std::span<const std::string> ids, const ScaleDensity& density,
                     const std::string& path) {
  if (ids.size() != density.ratios.size())
    throw std::invalid_argument("write_scale_csv: id/ratio count mismatch");
  auto f = open_csv(path);
  f << "sample_id,ratio\n";
  for (std::size_t i = 0; i < ids.size(); ++i) f << ids[i] << ',' << density.ratios[i] << "\n";
}

void write_fgbg_csv(std::span<const std::string> ids, std::span<const double> ratios,
                    const std::string& path) {
  if (ids.size() != ratios.size())
    throw std::invalid_argument("write_fgbg_csv: id/ratio count mismatch");
  auto f = open_csv(path);
  f << "sample_id,ratio_normalized\n";
  for (std::size_t i = 0; i < ids.size(); ++i) f << ids[i] << ',' << ratios[i] << "\n";
}

}  // namespace lgms::analysis
