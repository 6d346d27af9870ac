#pragma once

// PSNR and Gaussian-window SSIM on plain value arrays. No gradient tracking.

#include <optional>

#include "genie/tensor.hpp"

namespace genie {

inline constexpr double kPsnrCapDb = 99.0;

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double max_val = 1.0;
};

/// 10 log10(max^2 / MSE) over all elements; identical inputs give kPsnrCapDb.
double psnr(const Tensor& a, const Tensor& b, double max_val = 1.0);

/// PSNR restricted to pixels where `mask` is nonzero. Images are [C, H, W] or
/// [N, C, H, W]; the mask [1, H, W] or [N, 1, H, W] is shared across channels.
/// An empty mask gives kPsnrCapDb.
double masked_psnr(const Tensor& a, const Tensor& b, const Tensor& mask, double max_val = 1.0);

/// Mean SSIM over the valid (unpadded) window positions. Inputs are [H, W],
/// [C, H, W] or [1, C, H, W]; colour images are reduced to grey by channel mean.
double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opts = {});

struct MetricSummary {
  std::vector<double> psnr_db;
  std::vector<double> ssim;
  double mean_psnr = 0;
  double mean_ssim = 0;
  std::optional<double> mean_masked_psnr;
};

/// Per-item metrics over [N, C, H, W] batches; the masked PSNR mean is filled when a mask is given.
MetricSummary evaluate_batch(const Tensor& predicted, const Tensor& truth, const Tensor& mask = Tensor());

}  // namespace genie
