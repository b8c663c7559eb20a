#pragma once

#include <utility>
#include <vector>

#include "mvir/geometry.hpp"
#include "mvir/model.hpp"
#include "mvir/tensor.hpp"

namespace mvir {

struct ConsistencyReport {
    double albedo_rmse = 0;
    double metallic_rmse = 0;
    double roughness_rmse = 0;
    int pair_count = 0;          // ordered pairs that met the overlap minimum
    double mean_overlap = 0;     // mean overlap fraction over included pairs
};

/// Cross-view consistency: for every ordered view pair, reprojects the source
/// view's predicted maps into the target and accumulates squared error
/// against the target's own prediction. RMSE is pooled over all overlap
/// pixels across pairs; pairs under `min_overlap_frac` are dropped.
ConsistencyReport mv_consistency_rmse(const std::vector<CameraView>& views, const IntrinsicSet& preds,
                                      double min_overlap_frac = 0.05, double occlusion_tol = 0.01);

struct TemporalReport {
    double albedo_rmse = 0;
    double metallic_rmse = 0;
    double roughness_rmse = 0;
    double shading_rmse = 0;
};

/// Temporal stability over a frame sequence: warps frame t+1's prediction to
/// frame t through the given flow fields and pools RMSE over valid pixels of
/// all adjacent pairs. flows[t]/validity[t] map frame t into t+1.
TemporalReport temporal_warp_rmse(const IntrinsicSet& preds, const std::vector<Tensor>& flows,
                                  const std::vector<Tensor>& validity);

struct NormalReport {
    double mae_deg = 0;
    double pct_below_11_25 = 0;
    double pct_below_30 = 0;
};

/// Angular error statistics between unit normal maps over valid pixels.
NormalReport normal_metrics(const Tensor& pred, const Tensor& gt, const Tensor& mask);

/// PSNR (dB, capped at 99) and SSIM (11x11 Gaussian window, sigma 1.5,
/// K1=0.01, K2=0.03, dynamic range 1, windows fully inside the image,
/// averaged over channels). Inputs are [C,H,W] in [0,1] with H,W >= 11.
std::pair<double, double> psnr_ssim(const Tensor& img, const Tensor& ref);

}  // namespace mvir
