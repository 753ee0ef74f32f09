#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lgms/arch.hpp"
#include "lgms/tensor.hpp"
#include "lgms/train.hpp"

namespace lgms::analysis {

// Singular values of a rank-2 matrix in descending order, via one-sided
// Jacobi on the taller orientation (convergence tolerance 1e-10, at most
// 100 sweeps). Sized for the C x H*W matrices this module sees: one small
// dimension, possibly many columns.
std::vector<double> singular_values(const Tensor& matrix);

// Number of singular values above tau * sigma_max for the (C, H*W)
// reshaping of a feature map. An all-zero feature map counts as 0.
std::int64_t channel_redundancy(const Tensor& feature_chw, double tau = 0.01);

struct RedundancyReport {
  struct Row {
    std::string sample_id;
    std::int64_t count = 0;
  };
  std::string layer;
  double tau = 0.01;
  std::vector<Row> rows;
  double mean_count = 0.0;
};

struct ScaleDensity {
  std::vector<double> ratios;               // one per mask, foreground / total
  std::array<std::int64_t, 50> bins{};      // uniform over [0, 1]
};

ScaleDensity fg_scale_density(std::span<const Tensor> masks);

// Top singular value of the foreground-column submatrix over that of the
// background-column submatrix, each normalized by sqrt(column count) so
// region size does not dominate. The mask is nearest-downsampled to the
// feature resolution; both regions must be nonempty.
double fg_bg_singular_ratio(const Tensor& feature_chw, const Tensor& mask_1hw);

// Runs the encoder on one sample and writes stage `stage` (1-based) as
// `<prefix>.lgts` plus a min-max normalized channel-mean `<prefix>.pgm`.
void export_features(const arch::LgmsNet& net, arch::ParamStore& params,
                     const train::SegSample& sample, int stage, const std::string& prefix);

// CSV emitters (deterministic sample-id order is the caller's contract).
void write_redundancy_csv(const RedundancyReport& report, const std::string& path);
void write_scale_csv(std::span<const std::string> ids, const ScaleDensity& density,
                     const std::string& path);
void write_fgbg_csv(std::span<const std::string> ids, std::span<const double> ratios,
                    const std::string& path);

}  // namespace lgms::analysis
