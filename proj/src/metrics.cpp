#include "mvir/metrics.hpp"

#include <cmath>

namespace mvir {

namespace {

constexpr double kRad2Deg = 180.0 / 3.14159265358979323846;

void check_unit_normals(const Tensor& n, const Tensor& mask, const char* who) {
    const long long hw = static_cast<long long>(n.dim(1)) * n.dim(2);
    for (long long p = 0; p < hw; ++p) {
        if (mask.at(p) < 0.5) continue;
        const double s = n.at(p) * n.at(p) + n.at(hw + p) * n.at(hw + p) + n.at(2 * hw + p) * n.at(2 * hw + p);
        if (std::fabs(std::sqrt(s) - 1.0) > 1e-3)
            throw ContractError(std::string(who) + ": non-unit normal at valid pixel " + std::to_string(p));
    }
}

}  // namespace

ConsistencyReport mv_consistency_rmse(const std::vector<CameraView>& views, const IntrinsicSet& preds,
                                      double min_overlap_frac, double occlusion_tol) {
    const size_t n = views.size();
    if (n < 2) throw ConfigError("mv_consistency_rmse: need at least 2 views");
    if (preds.num_views() != n) throw ContractError("mv_consistency_rmse: view/prediction count mismatch");
    ConsistencyReport rep;
    double acc_a = 0, acc_m = 0, acc_r = 0;
    long long px = 0;
    double overlap_sum = 0;
    for (size_t i = 0; i < n; ++i) {
        // one [5,H,W] payload per source view: albedo, metallic, roughness
        Tensor payload = Tensor::zeros({5, views[i].height(), views[i].width()});
        const long long hw = static_cast<long long>(views[i].height()) * views[i].width();
        for (long long p = 0; p < hw; ++p) {
            for (int c = 0; c < 3; ++c) payload.at(c * hw + p) = preds.albedo[i].at(c * hw + p);
            payload.at(3 * hw + p) = preds.metallic[i].at(p);
            payload.at(4 * hw + p) = preds.roughness[i].at(p);
        }
        for (size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            ReprojectResult r = reproject_map(views[i], payload, views[j], occlusion_tol);
            const long long dhw = static_cast<long long>(views[j].height()) * views[j].width();
            long long overlap = 0;
            for (long long p = 0; p < dhw; ++p) overlap += r.overlap.at(p) > 0.5 ? 1 : 0;
            if (static_cast<double>(overlap) < min_overlap_frac * static_cast<double>(dhw)) continue;
            ++rep.pair_count;
            overlap_sum += static_cast<double>(overlap) / static_cast<double>(dhw);
            for (long long p = 0; p < dhw; ++p) {
                if (r.overlap.at(p) < 0.5) continue;
                ++px;
                for (int c = 0; c < 3; ++c) {
                    const double d = r.map.at(c * dhw + p) - preds.albedo[j].at(c * dhw + p);
                    acc_a += d * d;
                }
                const double dm = r.map.at(3 * dhw + p) - preds.metallic[j].at(p);
                const double dr = r.map.at(4 * dhw + p) - preds.roughness[j].at(p);
                acc_m += dm * dm;
                acc_r += dr * dr;
            }
        }
    }
    if (px > 0) {
        rep.albedo_rmse = std::sqrt(acc_a / static_cast<double>(3 * px));
        rep.metallic_rmse = std::sqrt(acc_m / static_cast<double>(px));
        rep.roughness_rmse = std::sqrt(acc_r / static_cast<double>(px));
    }
    if (rep.pair_count > 0) rep.mean_overlap = overlap_sum / rep.pair_count;
    return rep;
}

TemporalReport temporal_warp_rmse(const IntrinsicSet& preds, const std::vector<Tensor>& flows,
                                  const std::vector<Tensor>& validity) {
    const size_t n = preds.num_views();
    if (n < 2) throw ConfigError("temporal_warp_rmse: need at least 2 frames");
    if (flows.size() + 1 < n || validity.size() + 1 < n)
        throw ContractError("temporal_warp_rmse: need a flow/validity per adjacent pair");
    double acc[4] = {0, 0, 0, 0};
    long long px = 0;
    for (size_t t = 0; t + 1 < n; ++t) {
        const Tensor warped[4] = {warp_backward(preds.albedo[t + 1], flows[t], validity[t]),
                                  warp_backward(preds.metallic[t + 1], flows[t], validity[t]),
                                  warp_backward(preds.roughness[t + 1], flows[t], validity[t]),
                                  warp_backward(preds.shading[t + 1], flows[t], validity[t])};
        const Tensor* cur[4] = {&preds.albedo[t], &preds.metallic[t], &preds.roughness[t], &preds.shading[t]};
        const long long hw = static_cast<long long>(validity[t].dim(0)) * validity[t].dim(1);
        for (long long p = 0; p < hw; ++p) {
            if (validity[t].at(p) < 0.5) continue;
            ++px;
            for (int k = 0; k < 4; ++k) {
                const int c = cur[k]->dim(0);
                double s = 0;
                for (int ci = 0; ci < c; ++ci) {
                    const double d = warped[k].at(ci * hw + p) - cur[k]->at(ci * hw + p);
                    s += d * d;
                }
                acc[k] += s / c;
            }
        }
    }
    TemporalReport rep;
    if (px > 0) {
        rep.albedo_rmse = std::sqrt(acc[0] / static_cast<double>(px));
        rep.metallic_rmse = std::sqrt(acc[1] / static_cast<double>(px));
        rep.roughness_rmse = std::sqrt(acc[2] / static_cast<double>(px));
        rep.shading_rmse = std::sqrt(acc[3] / static_cast<double>(px));
    }
    return rep;
}

NormalReport normal_metrics(const Tensor& pred, const Tensor& gt, const Tensor& mask) {
    check_same_shape(pred, gt, "normal_metrics");
    check_unit_normals(pred, mask, "normal_metrics(pred)");
    check_unit_normals(gt, mask, "normal_metrics(gt)");
    const long long hw = static_cast<long long>(pred.dim(1)) * pred.dim(2);
    double sum_deg = 0;
    long long cnt = 0, below_11 = 0, below_30 = 0;
    for (long long p = 0; p < hw; ++p) {
        if (mask.at(p) < 0.5) continue;
        double a[3], b[3];
        for (int c = 0; c < 3; ++c) {
            a[c] = pred.at(c * hw + p);
            b[c] = gt.at(c * hw + p);
        }
        const double dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        const double cx = a[1] * b[2] - a[2] * b[1];
        const double cy = a[2] * b[0] - a[0] * b[2];
        const double cz = a[0] * b[1] - a[1] * b[0];
        // atan2 of the cross/dot pair: exact 0 for identical vectors and well
        // conditioned near 0/180 degrees, unlike acos of the clamped dot
        const double deg = std::atan2(std::sqrt(cx * cx + cy * cy + cz * cz), dot) * kRad2Deg;
        sum_deg += deg;
        if (deg < 11.25) ++below_11;
        if (deg < 30.0) ++below_30;
        ++cnt;
    }
    NormalReport rep;
    if (cnt > 0) {
        rep.mae_deg = sum_deg / static_cast<double>(cnt);
        rep.pct_below_11_25 = 100.0 * static_cast<double>(below_11) / static_cast<double>(cnt);
        rep.pct_below_30 = 100.0 * static_cast<double>(below_30) / static_cast<double>(cnt);
    }
    return rep;
}

std::pair<double, double> psnr_ssim(const Tensor& img, const Tensor& ref) {
    check_same_shape(img, ref, "psnr_ssim");
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (h < 11 || w < 11) throw ShapeError("psnr_ssim: image must be at least 11x11");
    double mse = 0;
    for (long long i = 0; i < img.size(); ++i) {
        const double d = img.at(i) - ref.at(i);
        mse += d * d;
    }
    mse /= static_cast<double>(img.size());
    const double psnr = mse < 1e-10 ? 99.0 : std::min(99.0, 10.0 * std::log10(1.0 / mse));

    // 11x11 Gaussian window, sigma 1.5, normalized
    double kern[11][11];
    double ksum = 0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
            const double dy = i - 5, dx = j - 5;
            kern[i][j] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
            ksum += kern[i][j];
        }
    for (auto& row : kern)
        for (double& v : row) v /= ksum;

    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const long long hw = static_cast<long long>(h) * w;
    double ssim_sum = 0;
    long long windows = 0;
    for (int ci = 0; ci < c; ++ci)
        for (int y = 5; y < h - 5; ++y)
            for (int x = 5; x < w - 5; ++x) {
                double mu_a = 0, mu_b = 0, saa = 0, sbb = 0, sab = 0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        const long long q = static_cast<long long>(ci) * hw + (y + i - 5) * w + (x + j - 5);
                        const double a = img.at(q), b = ref.at(q), k = kern[i][j];
                        mu_a += k * a;
                        mu_b += k * b;
                        saa += k * a * a;
                        sbb += k * b * b;
                        sab += k * a * b;
                    }
                const double va = saa - mu_a * mu_a, vb = sbb - mu_b * mu_b, cov = sab - mu_a * mu_b;
                ssim_sum += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                            ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
                ++windows;
            }
    return {psnr, ssim_sum / static_cast<double>(windows)};
}

}  // namespace mvir
