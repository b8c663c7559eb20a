#include "doctest.h"

#include <cmath>
#include <random>
#include <vector>

#include "gradcheck.hpp"
#include "mvir/losses.hpp"

using namespace mvir;

namespace {

Tensor random_map(Shape shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(shape);
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : t.data()) v = d(rng);
    return t;
}

ValidityMask random_mask(int h, int w, std::mt19937_64& rng, double keep = 0.7) {
    Tensor m = Tensor::zeros({h, w});
    std::uniform_real_distribution<double> d(0.0, 1.0);
    for (auto& v : m.data()) v = d(rng) < keep ? 1.0 : 0.0;
    // guarantee at least one valid pixel
    m.at(0) = 1.0;
    return {m};
}

// Straight-loop masked MSE used as an independent reference.
double loop_mse(const Tensor& p, const Tensor& g, const Tensor& m) {
    const int c = p.dim(0);
    const long long hw = static_cast<long long>(p.dim(1)) * p.dim(2);
    double acc = 0.0;
    long long n = 0;
    for (long long px = 0; px < hw; ++px) {
        if (m.at(px) < 0.5) continue;
        ++n;
        for (int ci = 0; ci < c; ++ci) {
            const double d = p.at(ci * hw + px) - g.at(ci * hw + px);
            acc += d * d;
        }
    }
    return n == 0 ? 0.0 : acc / static_cast<double>(n * c);
}

// Reference 2x block-average downsample (equals align-corners-false bilinear
// for an exact factor of 2).
std::vector<std::vector<double>> down2(const std::vector<std::vector<double>>& img) {
    const size_t h = img.size() / 2, w = img[0].size() / 2;
    std::vector<std::vector<double>> out(h, std::vector<double>(w));
    for (size_t y = 0; y < h; ++y)
        for (size_t x = 0; x < w; ++x)
            out[y][x] = 0.25 * (img[2 * y][2 * x] + img[2 * y][2 * x + 1] + img[2 * y + 1][2 * x] + img[2 * y + 1][2 * x + 1]);
    return out;
}

}  // namespace

TEST_CASE("mse_loss basics and loop oracle") {
    std::mt19937_64 rng(11);
    Tensor p = random_map({3, 5, 4}, rng);
    SUBCASE("identical inputs give zero") {
        CHECK(mse_loss(p, p, ValidityMask::full(5, 4)).item() == 0.0);
    }
    SUBCASE("unit gap with full mask gives one") {
        Tensor ones = Tensor::ones({3, 5, 4});
        Tensor zeros = Tensor::zeros({3, 5, 4});
        CHECK(mse_loss(ones, zeros, ValidityMask::full(5, 4)).item() == doctest::Approx(1.0).epsilon(1e-15));
    }
    SUBCASE("random pair with random mask matches explicit loop") {
        Tensor g = random_map({3, 5, 4}, rng);
        ValidityMask m = random_mask(5, 4, rng);
        CHECK(mse_loss(p, g, m).item() == doctest::Approx(loop_mse(p, g, m.mask)).epsilon(1e-12));
    }
    SUBCASE("empty mask gives zero with warning flag") {
        bool warned = false;
        Tensor g = random_map({3, 5, 4}, rng);
        CHECK(mse_loss(p, g, {Tensor::zeros({5, 4})}, &warned).item() == 0.0);
        CHECK(warned);
    }
    SUBCASE("shape mismatch rejected") {
        CHECK_THROWS_AS(mse_loss(p, Tensor::zeros({3, 4, 4}), ValidityMask::full(5, 4)), ShapeError);
    }
}

TEST_CASE("msg_loss vanishing cases") {
    Tensor a = Tensor::full({1, 6, 6}, 0.3);
    Tensor b = Tensor::full({1, 6, 6}, 0.8);
    CHECK(msg_loss(a, b, ValidityMask::full(6, 6), 3).item() == 0.0);
    std::mt19937_64 rng(3);
    Tensor r = random_map({2, 8, 8}, rng);
    CHECK(msg_loss(r, r, ValidityMask::full(8, 8), 4).item() == 0.0);
}

TEST_CASE("msg_loss matches hand-rolled two-scale pyramid oracle") {
    std::mt19937_64 rng(17);
    std::vector<std::vector<double>> p(4, std::vector<double>(4)), g(4, std::vector<double>(4));
    std::uniform_real_distribution<double> d(0.0, 1.0);
    Tensor pt = Tensor::zeros({1, 4, 4}), gt = Tensor::zeros({1, 4, 4});
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            p[static_cast<size_t>(y)][static_cast<size_t>(x)] = d(rng);
            g[static_cast<size_t>(y)][static_cast<size_t>(x)] = d(rng);
            pt.at(y * 4 + x) = p[static_cast<size_t>(y)][static_cast<size_t>(x)];
            gt.at(y * 4 + x) = g[static_cast<size_t>(y)][static_cast<size_t>(x)];
        }
    auto scale_term = [](const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
        const size_t h = a.size(), w = a[0].size();
        double acc = 0.0;
        long long cnt = 0;
        for (size_t y = 0; y + 1 < h; ++y)
            for (size_t x = 0; x < w; ++x) {
                const double dd = (a[y + 1][x] - a[y][x]) - (b[y + 1][x] - b[y][x]);
                acc += dd * dd;
                ++cnt;
            }
        for (size_t y = 0; y < h; ++y)
            for (size_t x = 0; x + 1 < w; ++x) {
                const double dd = (a[y][x + 1] - a[y][x]) - (b[y][x + 1] - b[y][x]);
                acc += dd * dd;
                ++cnt;
            }
        return acc / static_cast<double>(cnt);
    };
    const double expected = 0.5 * (scale_term(p, g) + scale_term(down2(p), down2(g)));
    CHECK(msg_loss(pt, gt, ValidityMask::full(4, 4), 2).item() == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("msg_loss skips sub-2x2 scales with warning") {
    std::mt19937_64 rng(5);
    Tensor p = random_map({1, 3, 3}, rng), g = random_map({1, 3, 3}, rng);
    bool skipped = false;
    // scale 1 would be 1x1: skipped, leaving only the full-resolution term
    const double multi = msg_loss(p, g, ValidityMask::full(3, 3), 4, &skipped).item();
    const double single = msg_loss(p, g, ValidityMask::full(3, 3), 1).item();
    CHECK(skipped);
    CHECK(multi == doctest::Approx(single).epsilon(1e-14));
}

TEST_CASE("scale_invariant_albedo_loss") {
    std::mt19937_64 rng(23);
    SUBCASE("constant maps align exactly") {
        Tensor a = Tensor::full({3, 4, 4}, 0.2);
        Tensor g = Tensor::full({3, 4, 4}, 0.4);
        std::vector<double> s;
        const double loss = scale_invariant_albedo_loss(a, g, ValidityMask::full(4, 4), &s).item();
        for (double sc : s) CHECK(sc == doctest::Approx(2.0).epsilon(1e-12));
        CHECK(loss < 1e-15);
    }
    SUBCASE("invariance under positive per-channel rescale") {
        Tensor a = random_map({3, 6, 5}, rng, 0.05, 0.95);
        Tensor g = random_map({3, 6, 5}, rng, 0.05, 0.95);
        ValidityMask m = random_mask(6, 5, rng);
        const double base = scale_invariant_albedo_loss(a, g, m).item();
        Tensor ka = scale_channels(a, {3.7, 0.21, 12.0});
        CHECK(scale_invariant_albedo_loss(ka, g, m).item() == doctest::Approx(base).epsilon(1e-10));
    }
    SUBCASE("closed-form scale and two-step loss oracle") {
        Tensor a = random_map({3, 5, 5}, rng, 0.05, 0.95);
        Tensor g = random_map({3, 5, 5}, rng, 0.05, 0.95);
        ValidityMask m = random_mask(5, 5, rng);
        std::vector<double> s;
        const double loss = scale_invariant_albedo_loss(a, g, m, &s).item();
        const long long hw = 25;
        std::vector<double> s_ref(3);
        for (int c = 0; c < 3; ++c) {
            double num = 0, den = 0;
            for (long long px = 0; px < hw; ++px) {
                if (m.mask.at(px) < 0.5) continue;
                num += a.at(c * hw + px) * g.at(c * hw + px);
                den += a.at(c * hw + px) * a.at(c * hw + px);
            }
            s_ref[static_cast<size_t>(c)] = num / den;
            CHECK(s[static_cast<size_t>(c)] == doctest::Approx(s_ref[static_cast<size_t>(c)]).epsilon(1e-12));
        }
        CHECK(loss == doctest::Approx(loop_mse(scale_channels(a, s_ref), g, m.mask)).epsilon(1e-12));
    }
    SUBCASE("all-dark channel falls back to unit scale") {
        Tensor a = Tensor::zeros({3, 4, 4});
        for (long long i = 16; i < 48; ++i) a.at(i) = 0.3;  // channels 1,2 lit, channel 0 dark
        Tensor g = Tensor::full({3, 4, 4}, 0.5);
        std::vector<double> s;
        scale_invariant_albedo_loss(a, g, ValidityMask::full(4, 4), &s);
        CHECK(s[0] == 1.0);
    }
}

TEST_CASE("normal_loss on canonical configurations") {
    auto const_normal = [](double x, double y, double z) {
        Tensor n = Tensor::zeros({3, 3, 3});
        for (long long p = 0; p < 9; ++p) {
            n.at(p) = x;
            n.at(9 + p) = y;
            n.at(18 + p) = z;
        }
        return n;
    };
    Tensor n = const_normal(0, 0, -1);
    ValidityMask full = ValidityMask::full(3, 3);
    CHECK(std::fabs(normal_loss(n, n, full).item()) < 1e-12);
    CHECK(normal_loss(const_normal(0, 0, 1), n, full).item() == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(normal_loss(const_normal(1, 0, 0), n, full).item() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(normal_loss(const_normal(0, 0, -0.5), n, full), ContractError);
    // non-unit values behind an invalid pixel are fine
    Tensor bad = const_normal(0, 0, -1);
    bad.at(0) = 9.0;
    Tensor m = Tensor::ones({3, 3});
    m.at(0) = 0.0;
    CHECK_NOTHROW(normal_loss(bad, n, {m}));
}

namespace {

IntrinsicSet random_set(int views, int h, int w, std::mt19937_64& rng, bool unit_normals = true) {
    IntrinsicSet s;
    for (int i = 0; i < views; ++i) {
        s.albedo.push_back(random_map({3, h, w}, rng, 0.05, 0.95));
        s.metallic.push_back(random_map({1, h, w}, rng));
        s.roughness.push_back(random_map({1, h, w}, rng));
        Tensor n = random_map({3, h, w}, rng, -1.0, 1.0);
        s.normal.push_back(unit_normals ? normalize_channels(n).detach_copy() : n);
        s.shading.push_back(random_map({3, h, w}, rng));
    }
    return s;
}

}  // namespace

TEST_CASE("composite_loss") {
    std::mt19937_64 rng(31);
    const int h = 6, w = 6;
    IntrinsicSet gt = random_set(2, h, w, rng);
    std::vector<ValidityMask> masks = {random_mask(h, w, rng), random_mask(h, w, rng)};
    SUBCASE("identical prediction gives zero") {
        CHECK(std::fabs(composite_loss(gt, gt, LossWeights{}, masks).item()) < 1e-12);
    }
    SUBCASE("zero weights give zero") {
        IntrinsicSet pred = random_set(2, h, w, rng);
        LossWeights z{0, 0, 0, 0, 0, 0};
        CHECK(composite_loss(pred, gt, z, masks).item() == 0.0);
    }
    SUBCASE("matches hand-summed per-term oracle") {
        IntrinsicSet pred = random_set(2, h, w, rng);
        LossWeights lw{1.5, 0.7, 2.0, 0.3, 1.1, 0.1};
        CompositeLossTerms terms;
        const double total = composite_loss(pred, gt, lw, masks, 4, false, &terms).item();
        double la = 0, lm = 0, lr = 0, ln = 0, ld = 0;
        for (size_t i = 0; i < 2; ++i) {
            la += scale_invariant_albedo_loss(pred.albedo[i], gt.albedo[i], masks[i]).item() +
                  msg_loss(pred.albedo[i], gt.albedo[i], masks[i], 4).item();
            lm += mse_loss(pred.metallic[i], gt.metallic[i], masks[i]).item() +
                  msg_loss(pred.metallic[i], gt.metallic[i], masks[i], 4).item();
            lr += mse_loss(pred.roughness[i], gt.roughness[i], masks[i]).item() +
                  msg_loss(pred.roughness[i], gt.roughness[i], masks[i], 4).item();
            ln += normal_loss(pred.normal[i], gt.normal[i], masks[i]).item();
            ld += mse_loss(pred.shading[i], gt.shading[i], masks[i]).item() +
                  msg_loss(pred.shading[i], gt.shading[i], masks[i], 4).item();
        }
        la /= 2; lm /= 2; lr /= 2; ln /= 2; ld /= 2;
        CHECK(terms.albedo == doctest::Approx(la).epsilon(1e-12));
        const double expected = 1.5 * la + 0.7 * lm + 2.0 * lr + 0.3 * ln + 1.1 * ld;
        CHECK(total == doctest::Approx(expected).epsilon(1e-12));
    }
    SUBCASE("warm-up switches albedo term to vanilla MSE") {
        IntrinsicSet pred = random_set(2, h, w, rng);
        CompositeLossTerms warm, normal;
        composite_loss(pred, gt, LossWeights{}, masks, 4, true, &warm);
        composite_loss(pred, gt, LossWeights{}, masks, 4, false, &normal);
        double warm_ref = 0;
        for (size_t i = 0; i < 2; ++i)
            warm_ref += mse_loss(pred.albedo[i], gt.albedo[i], masks[i]).item() +
                        msg_loss(pred.albedo[i], gt.albedo[i], masks[i], 4).item();
        CHECK(warm.albedo == doctest::Approx(warm_ref / 2).epsilon(1e-12));
        CHECK(warm.albedo != doctest::Approx(normal.albedo).epsilon(1e-12));
        CHECK(warm.metallic == doctest::Approx(normal.metallic).epsilon(1e-12));
    }
    SUBCASE("view count mismatch rejected") {
        IntrinsicSet pred = random_set(1, h, w, rng);
        CHECK_THROWS_AS(composite_loss(pred, gt, LossWeights{}, masks), ContractError);
    }
}

TEST_CASE("finetune_loss") {
    std::mt19937_64 rng(41);
    Tensor a = random_map({3, 5, 5}, rng);
    SUBCASE("static and anchored gives zero") {
        CHECK(finetune_loss(a, a, a, a, ValidityMask::full(5, 5), 0.1).item() == 0.0);
    }
    SUBCASE("zero anchor weight ignores anchor deviation") {
        Tensor other = random_map({3, 5, 5}, rng);
        CHECK(finetune_loss(a, other, a, a, ValidityMask::full(5, 5), 0.0).item() == 0.0);
    }
    SUBCASE("matches two-term oracle") {
        Tensor pret = random_map({3, 5, 5}, rng);
        Tensor pt = random_map({3, 5, 5}, rng);
        Tensor warped = random_map({3, 5, 5}, rng);
        ValidityMask vm = random_mask(5, 5, rng);
        const double expected =
            0.1 * loop_mse(a, pret, Tensor::ones({5, 5})) + loop_mse(pt, warped, vm.mask);
        CHECK(finetune_loss(a, pret, pt, warped, vm, 0.1).item() == doctest::Approx(expected).epsilon(1e-12));
    }
    SUBCASE("empty warp mask warns, consistency term zero") {
        bool warned = false;
        Tensor pret = random_map({3, 5, 5}, rng);
        const double v = finetune_loss(a, pret, a, random_map({3, 5, 5}, rng), {Tensor::zeros({5, 5})}, 0.5, &warned).item();
        CHECK(warned);
        CHECK(v == doctest::Approx(0.5 * loop_mse(a, pret, Tensor::ones({5, 5}))).epsilon(1e-12));
    }
}

TEST_CASE("masked pixels carry exactly zero influence") {
    std::mt19937_64 rng(53);
    Tensor pred = random_map({3, 4, 4}, rng, 0.05, 0.95);
    Tensor gt = random_map({3, 4, 4}, rng, 0.05, 0.95);
    Tensor m = Tensor::ones({4, 4});
    m.at(5) = 0.0;
    ValidityMask mask{m};
    const double mse0 = mse_loss(pred, gt, mask).item();
    const double si0 = scale_invariant_albedo_loss(pred, gt, mask).item();
    const double msg0 = msg_loss(pred, gt, mask, 2).item();
    for (int c = 0; c < 3; ++c) pred.at(c * 16 + 5) += 7.0;
    CHECK(mse_loss(pred, gt, mask).item() == mse0);
    CHECK(scale_invariant_albedo_loss(pred, gt, mask).item() == si0);
    CHECK(msg_loss(pred, gt, mask, 2).item() == msg0);
}

TEST_CASE("losses pass finite-difference gradient checks") {
    std::mt19937_64 rng(67);
    Tensor gt = random_map({3, 5, 5}, rng, 0.1, 0.9);
    ValidityMask mask = random_mask(5, 5, rng);
    SUBCASE("mse") {
        Tensor pred = random_map({3, 5, 5}, rng, 0.1, 0.9);
        pred.set_requires_grad(true);
        std::vector<Tensor> params{pred};
        CHECK(gradcheck_max_rel_err(params, [&] { return mse_loss(pred, gt, mask); }, rng) < 1e-4);
    }
    SUBCASE("msg") {
        Tensor pred = random_map({3, 5, 5}, rng, 0.1, 0.9);
        pred.set_requires_grad(true);
        std::vector<Tensor> params{pred};
        CHECK(gradcheck_max_rel_err(params, [&] { return msg_loss(pred, gt, mask, 2); }, rng) < 1e-4);
    }
    SUBCASE("scale-invariant albedo (envelope through detached s*)") {
        Tensor pred = random_map({3, 5, 5}, rng, 0.1, 0.9);
        pred.set_requires_grad(true);
        std::vector<Tensor> params{pred};
        CHECK(gradcheck_max_rel_err(params, [&] { return scale_invariant_albedo_loss(pred, gt, mask); }, rng) < 1e-4);
    }
    SUBCASE("normal loss through a normalization head") {
        Tensor raw = random_map({3, 5, 5}, rng, -1.0, 1.0);
        raw.set_requires_grad(true);
        Tensor gtn = normalize_channels(random_map({3, 5, 5}, rng, -1.0, 1.0)).detach_copy();
        std::vector<Tensor> params{raw};
        CHECK(gradcheck_max_rel_err(params,
                                    [&] { return normal_loss(normalize_channels(raw), gtn, mask); }, rng) < 1e-4);
    }
    SUBCASE("finetune") {
        Tensor p0 = random_map({3, 5, 5}, rng), pt = random_map({3, 5, 5}, rng);
        p0.set_requires_grad(true);
        pt.set_requires_grad(true);
        Tensor pret = random_map({3, 5, 5}, rng), warped = random_map({3, 5, 5}, rng);
        std::vector<Tensor> params{p0, pt};
        CHECK(gradcheck_max_rel_err(
                  params, [&] { return finetune_loss(p0, pret, pt, warped, mask, 0.1); }, rng) < 1e-4);
    }
}
