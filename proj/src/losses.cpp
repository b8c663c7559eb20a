#include "mvir/losses.hpp"

#include <cmath>

namespace mvir {

namespace {

// Validity mask for the half-resolution pyramid level: a coarse pixel stays
// valid only if its full 2x2 source footprint is valid.
Tensor downsample_mask_and(const Tensor& mask) {
    const int h = mask.dim(0), w = mask.dim(1);
    const int oh = h / 2, ow = w / 2;
    Tensor out = Tensor::zeros({oh, ow});
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            const bool ok = mask.at(2 * y * w + 2 * x) > 0.5 && mask.at(2 * y * w + 2 * x + 1) > 0.5 &&
                            mask.at((2 * y + 1) * w + 2 * x) > 0.5 && mask.at((2 * y + 1) * w + 2 * x + 1) > 0.5;
            out.at(y * ow + x) = ok ? 1.0 : 0.0;
        }
    return out;
}

// Forward-difference validity: both pixels of the difference must be valid.
Tensor grad_mask_h(const Tensor& mask) {
    const int h = mask.dim(0), w = mask.dim(1);
    Tensor out = Tensor::zeros({h - 1, w});
    for (int y = 0; y + 1 < h; ++y)
        for (int x = 0; x < w; ++x)
            out.at(y * w + x) = (mask.at(y * w + x) > 0.5 && mask.at((y + 1) * w + x) > 0.5) ? 1.0 : 0.0;
    return out;
}

Tensor grad_mask_w(const Tensor& mask) {
    const int h = mask.dim(0), w = mask.dim(1);
    Tensor out = Tensor::zeros({h, w - 1});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x + 1 < w; ++x)
            out.at(y * (w - 1) + x) = (mask.at(y * w + x) > 0.5 && mask.at(y * w + x + 1) > 0.5) ? 1.0 : 0.0;
    return out;
}

long long mask_count(const Tensor& mask) {
    long long n = 0;
    for (double v : mask.data())
        if (v > 0.5) ++n;
    return n;
}

}  // namespace

ValidityMask ValidityMask::from_albedo(const Tensor& gt_albedo, const Tensor* dataset_mask, double lo, double hi) {
    const int c = gt_albedo.dim(0), h = gt_albedo.dim(1), w = gt_albedo.dim(2);
    const long long hw = static_cast<long long>(h) * w;
    Tensor m = Tensor::ones({h, w});
    for (long long p = 0; p < hw; ++p) {
        bool ok = true;
        for (int ci = 0; ci < c && ok; ++ci) {
            const double v = gt_albedo.at(ci * hw + p);
            if (v < lo || v > hi) ok = false;
        }
        if (dataset_mask && dataset_mask->at(p) < 0.5) ok = false;
        m.at(p) = ok ? 1.0 : 0.0;
    }
    return {m};
}

long long ValidityMask::count() const { return mask_count(mask); }

Tensor expand_mask(const ValidityMask& mask, int channels) {
    const int h = mask.mask.dim(0), w = mask.mask.dim(1);
    Tensor out = Tensor::zeros({channels, h, w});
    const long long hw = static_cast<long long>(h) * w;
    for (int c = 0; c < channels; ++c)
        for (long long p = 0; p < hw; ++p) out.at(c * hw + p) = mask.mask.at(p);
    return out;
}

Tensor mse_loss(const Tensor& pred, const Tensor& gt, const ValidityMask& mask, bool* zero_valid_warning) {
    check_same_shape(pred, gt, "mse_loss");
    const long long n = mask.count();
    if (n == 0) {
        if (zero_valid_warning) *zero_valid_warning = true;
        return Tensor::scalar(0.0);
    }
    const int c = pred.dim(0);
    Tensor d = sub(pred, gt);
    Tensor masked = mul(mul(d, d), expand_mask(mask, c));
    return scale(sum(masked), 1.0 / static_cast<double>(n * c));
}

Tensor msg_loss(const Tensor& pred, const Tensor& gt, const ValidityMask& mask, int num_scales,
                bool* scale_skipped_warning) {
    check_same_shape(pred, gt, "msg_loss");
    if (num_scales < 1) throw ContractError("msg_loss: need at least one scale");
    const int c = pred.dim(0);
    Tensor p = pred, g = gt, m = mask.mask;
    std::vector<Tensor> scale_values;
    for (int l = 0; l < num_scales; ++l) {
        if (l > 0) {
            const int nh = p.dim(1) / 2, nw = p.dim(2) / 2;
            if (nh < 2 || nw < 2) {
                if (scale_skipped_warning) *scale_skipped_warning = true;
                break;
            }
            p = bilinear_resize(p, nh, nw);
            g = bilinear_resize(g, nh, nw);
            m = downsample_mask_and(m);
        }
        if (p.dim(1) < 2 || p.dim(2) < 2) {
            if (scale_skipped_warning) *scale_skipped_warning = true;
            break;
        }
        Tensor mh = grad_mask_h(m), mw = grad_mask_w(m);
        const long long cnt = (mask_count(mh) + mask_count(mw)) * c;
        if (cnt == 0) {
            scale_values.push_back(Tensor::scalar(0.0));
            continue;
        }
        Tensor dh = sub(diff_h(p), diff_h(g));
        Tensor dw = sub(diff_w(p), diff_w(g));
        Tensor sq = add(sum(mul(mul(dh, dh), expand_mask({mh}, c))), sum(mul(mul(dw, dw), expand_mask({mw}, c))));
        scale_values.push_back(scale(sq, 1.0 / static_cast<double>(cnt)));
    }
    if (scale_values.empty()) {
        if (scale_skipped_warning) *scale_skipped_warning = true;
        return Tensor::scalar(0.0);
    }
    Tensor acc = scale_values[0];
    for (size_t i = 1; i < scale_values.size(); ++i) acc = add(acc, scale_values[i]);
    return scale(acc, 1.0 / static_cast<double>(scale_values.size()));
}

std::vector<double> albedo_scale_align(const Tensor& pred, const Tensor& gt, const ValidityMask& mask, double eps) {
    const int c = pred.dim(0), h = pred.dim(1), w = pred.dim(2);
    const long long hw = static_cast<long long>(h) * w;
    std::vector<double> s(static_cast<size_t>(c), 1.0);
    for (int ci = 0; ci < c; ++ci) {
        double num = 0.0, den = 0.0;
        for (long long p = 0; p < hw; ++p) {
            if (mask.mask.at(p) < 0.5) continue;
            num += pred.at(ci * hw + p) * gt.at(ci * hw + p);
            den += pred.at(ci * hw + p) * pred.at(ci * hw + p);
        }
        // Degenerate all-dark channels keep s = 1.
        if (den >= eps) s[static_cast<size_t>(ci)] = std::max(0.0, num / den);
    }
    return s;
}

Tensor scale_invariant_albedo_loss(const Tensor& pred, const Tensor& gt, const ValidityMask& mask,
                                   std::vector<double>* scales_out) {
    check_same_shape(pred, gt, "scale_invariant_albedo_loss");
    // s* is the least-squares minimizer, so treating it as a constant leaves
    // the gradient unchanged (envelope condition dL/ds = 0 at s*).
    std::vector<double> s = albedo_scale_align(pred, gt, mask);
    if (scales_out) *scales_out = s;
    return mse_loss(scale_channels(pred, s), gt, mask);
}

Tensor normal_loss(const Tensor& pred, const Tensor& gt, const ValidityMask& mask) {
    check_same_shape(pred, gt, "normal_loss");
    const int c = pred.dim(0), h = pred.dim(1), w = pred.dim(2);
    const long long hw = static_cast<long long>(h) * w;
    for (long long p = 0; p < hw; ++p) {
        if (mask.mask.at(p) < 0.5) continue;
        double np = 0, ng = 0;
        for (int ci = 0; ci < c; ++ci) {
            np += pred.at(ci * hw + p) * pred.at(ci * hw + p);
            ng += gt.at(ci * hw + p) * gt.at(ci * hw + p);
        }
        if (std::fabs(std::sqrt(np) - 1.0) > 1e-3 || std::fabs(std::sqrt(ng) - 1.0) > 1e-3)
            throw ContractError("normal_loss: non-unit normal at valid pixel " + std::to_string(p));
    }
    const long long n = mask.count();
    if (n == 0) return Tensor::scalar(0.0);
    Tensor dots = mul(mul(pred, gt), expand_mask(mask, c));
    // mean over valid of (1 - dot) == 1 - sum(dot)/count
    return add_scalar(scale(sum(dots), -1.0 / static_cast<double>(n)), 1.0);
}

Tensor composite_loss(const IntrinsicSet& pred, const IntrinsicSet& gt, const LossWeights& w,
                      const std::vector<ValidityMask>& masks, int msg_scales, bool warmup,
                      CompositeLossTerms* terms_out) {
    const size_t n = pred.num_views();
    if (n != gt.num_views() || n != masks.size())
        throw ContractError("composite_loss: view count mismatch");
    const double inv_n = 1.0 / static_cast<double>(n);
    Tensor la = Tensor::scalar(0.0), lm = Tensor::scalar(0.0), lr = Tensor::scalar(0.0);
    Tensor ln = Tensor::scalar(0.0), ld = Tensor::scalar(0.0);
    for (size_t i = 0; i < n; ++i) {
        const ValidityMask& m = masks[i];
        Tensor a_mse = warmup ? mse_loss(pred.albedo[i], gt.albedo[i], m)
                              : scale_invariant_albedo_loss(pred.albedo[i], gt.albedo[i], m);
        la = add(la, add(a_mse, msg_loss(pred.albedo[i], gt.albedo[i], m, msg_scales)));
        lm = add(lm, add(mse_loss(pred.metallic[i], gt.metallic[i], m),
                         msg_loss(pred.metallic[i], gt.metallic[i], m, msg_scales)));
        lr = add(lr, add(mse_loss(pred.roughness[i], gt.roughness[i], m),
                         msg_loss(pred.roughness[i], gt.roughness[i], m, msg_scales)));
        ln = add(ln, normal_loss(pred.normal[i], gt.normal[i], m));
        ld = add(ld, add(mse_loss(pred.shading[i], gt.shading[i], m),
                         msg_loss(pred.shading[i], gt.shading[i], m, msg_scales)));
    }
    la = scale(la, inv_n);
    lm = scale(lm, inv_n);
    lr = scale(lr, inv_n);
    ln = scale(ln, inv_n);
    ld = scale(ld, inv_n);
    Tensor total = add(add(add(scale(la, w.albedo), scale(lm, w.metallic)),
                           add(scale(lr, w.roughness), scale(ln, w.normal))),
                       scale(ld, w.shading));
    if (terms_out) {
        terms_out->albedo = la.item();
        terms_out->metallic = lm.item();
        terms_out->roughness = lr.item();
        terms_out->normal = ln.item();
        terms_out->shading = ld.item();
        terms_out->total = total.item();
    }
    return total;
}

Tensor finetune_loss(const Tensor& pred0, const Tensor& pretrained0, const Tensor& pred_t, const Tensor& warped,
                     const ValidityMask& warp_valid, double lambda_anchor, bool* empty_valid_warning) {
    check_same_shape(pred0, pretrained0, "finetune_loss(anchor)");
    check_same_shape(pred_t, warped, "finetune_loss(consistency)");
    const int h = pred0.dim(1), w = pred0.dim(2);
    Tensor anchor = mse_loss(pred0, pretrained0, ValidityMask::full(h, w));
    Tensor consistency = mse_loss(pred_t, warped, warp_valid, empty_valid_warning);
    return add(scale(anchor, lambda_anchor), consistency);
}

}  // namespace mvir
