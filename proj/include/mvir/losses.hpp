#pragma once

#include <array>
#include <vector>

#include "mvir/model.hpp"
#include "mvir/tensor.hpp"

namespace mvir {

struct LossWeights {
    double albedo = 1.0;
    double metallic = 1.0;
    double roughness = 1.0;
    double normal = 1.0;
    double shading = 1.0;
    double anchor = 0.1;
};

/// Per-pixel validity mask, stored as a {0,1}-valued [H,W] tensor. All loss
/// reductions divide by the count of valid pixels, never by total pixels.
struct ValidityMask {
    Tensor mask;

    static ValidityMask full(int h, int w) { return {Tensor::ones({h, w})}; }
    /// Dataset mask (optional) combined with the ground-truth-albedo
    /// thresholds: pixels with any channel below `lo` or above `hi` are
    /// excluded.
    static ValidityMask from_albedo(const Tensor& gt_albedo, const Tensor* dataset_mask = nullptr,
                                    double lo = 0.01, double hi = 0.99);

    long long count() const;
};

/// Per-channel least-squares alignment scales for the scale-invariant albedo
/// loss; degenerate (all-dark) channels fall back to 1.
std::vector<double> albedo_scale_align(const Tensor& pred, const Tensor& gt, const ValidityMask& mask,
                                       double eps = kDivEps);

Tensor mse_loss(const Tensor& pred, const Tensor& gt, const ValidityMask& mask, bool* zero_valid_warning = nullptr);

/// Multi-scale gradient loss over a factor-2 bilinear pyramid with forward
/// differences; masks shrink by AND over each pixel's 2x2 downsampling
/// footprint. Scales where the map falls under 2x2 are skipped.
Tensor msg_loss(const Tensor& pred, const Tensor& gt, const ValidityMask& mask, int num_scales,
                bool* scale_skipped_warning = nullptr);

Tensor scale_invariant_albedo_loss(const Tensor& pred, const Tensor& gt, const ValidityMask& mask,
                                   std::vector<double>* scales_out = nullptr);

/// Mean over valid pixels of 1 - <pred, gt>; both inputs must be unit per
/// pixel within 1e-3.
Tensor normal_loss(const Tensor& pred, const Tensor& gt, const ValidityMask& mask);

struct CompositeLossTerms {
    double albedo = 0, metallic = 0, roughness = 0, normal = 0, shading = 0, total = 0;
};

/// Composite training objective; `warmup` switches the albedo term to vanilla
/// MSE. `terms_out`, when given, receives the detached per-term values.
Tensor composite_loss(const IntrinsicSet& pred, const IntrinsicSet& gt, const LossWeights& w,
                      const std::vector<ValidityMask>& masks, int msg_scales = 4, bool warmup = false,
                      CompositeLossTerms* terms_out = nullptr);

/// Finetuning objective for one intrinsic channel: anchor MSE at frame 0 plus
/// flow-validity-masked consistency MSE between frame t and the warped t+1
/// prediction.
Tensor finetune_loss(const Tensor& pred0, const Tensor& pretrained0, const Tensor& pred_t, const Tensor& warped,
                     const ValidityMask& warp_valid, double lambda_anchor, bool* empty_valid_warning = nullptr);

/// Constant [C,H,W] channel-replication of an [H,W] mask.
Tensor expand_mask(const ValidityMask& mask, int channels);

}  // namespace mvir
