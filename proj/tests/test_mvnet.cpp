#include "doctest.h"

#include <cmath>
#include <random>
#include <vector>

#include "gradcheck.hpp"
#include "mvir/model.hpp"

using namespace mvir;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.patch_size = 4;
    cfg.embed_dim = 8;
    cfg.num_blocks = 4;
    cfg.num_heads = 2;
    cfg.head_channels = {4, 4, 4, 4};
    cfg.image_h = 16;
    cfg.image_w = 16;
    return cfg;
}

Tensor random_image(int h, int w, std::mt19937_64& rng) {
    Tensor t = Tensor::zeros({3, h, w});
    std::uniform_real_distribution<double> d(0.0, 1.0);
    for (auto& v : t.data()) v = d(rng);
    return t;
}

Tensor param(MVInverseNet& net, const std::string& name) {
    for (auto& [n, t] : net.named_params())
        if (n == name) return t;
    throw std::runtime_error("missing param " + name);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0;
    for (long long i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.at(i) - b.at(i)));
    return m;
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig cfg = tiny_config();
    cfg.num_blocks = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.num_heads = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.image_w = 18;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.head_channels = {4, 4};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("patch_embed") {
    std::mt19937_64 rng(7);
    SUBCASE("token count is (H/p)*(W/p)") {
        ModelConfig cfg = tiny_config();
        cfg.patch_size = 8;
        cfg.image_h = cfg.image_w = 32;
        MVInverseNet net(cfg, 1);
        TokenGrid g = net.patch_embed({random_image(32, 32, rng)});
        CHECK(g.tokens[0].dim(0) == 16);
        CHECK(g.tokens[0].dim(1) == cfg.embed_dim);
        CHECK(g.grid_h == 4);
        CHECK(g.grid_w == 4);
    }
    SUBCASE("zero image leaves only the positional encoding") {
        MVInverseNet net(tiny_config(), 2);
        TokenGrid g = net.patch_embed({Tensor::zeros({3, 16, 16})});
        Tensor pos = param(net, "embed.pos");
        CHECK(max_abs_diff(g.tokens[0], pos) == 0.0);
    }
    SUBCASE("single random patch matches straight-loop projection") {
        ModelConfig cfg = tiny_config();
        MVInverseNet net(cfg, 3);
        const int p = cfg.patch_size, c = cfg.embed_dim;
        std::uniform_real_distribution<double> d(0.0, 1.0);
        Tensor img = Tensor::zeros({3, 16, 16});
        // fill patch (gy=1, gx=2) -> token 6
        for (int ch = 0; ch < 3; ++ch)
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x) img.at(ch * 256 + (4 + y) * 16 + (8 + x)) = d(rng);
        TokenGrid g = net.patch_embed({img});
        Tensor w = param(net, "embed.w"), b = param(net, "embed.b"), pos = param(net, "embed.pos");
        const int t = 6;
        for (int out = 0; out < c; ++out) {
            double acc = b.at(out) + pos.at(t * c + out);
            int f = 0;
            for (int ch = 0; ch < 3; ++ch)
                for (int y = 0; y < p; ++y)
                    for (int x = 0; x < p; ++x, ++f) acc += img.at(ch * 256 + (4 + y) * 16 + (8 + x)) * w.at(f * c + out);
            CHECK(g.tokens[0].at(t * c + out) == doctest::Approx(acc).epsilon(1e-12));
        }
    }
    SUBCASE("wrong image extents rejected") {
        MVInverseNet net(tiny_config(), 4);
        CHECK_THROWS_AS(net.patch_embed({Tensor::zeros({3, 16, 20})}), ConfigError);
    }
}

TEST_CASE("frame_attention") {
    std::mt19937_64 rng(11);
    MVInverseNet net(tiny_config(), 5);
    Tensor img = random_image(16, 16, rng);
    SUBCASE("identical views produce identical outputs") {
        TokenGrid g = net.patch_embed({img, img});
        TokenGrid out = net.frame_attention(0, g);
        CHECK(max_abs_diff(out.tokens[0], out.tokens[1]) == 0.0);
    }
    SUBCASE("N=1 equals running the block on the lone view") {
        TokenGrid lone = net.patch_embed({img});
        TokenGrid batch = net.patch_embed({img, random_image(16, 16, rng)});
        TokenGrid out1 = net.frame_attention(0, lone);
        TokenGrid out2 = net.frame_attention(0, batch);
        CHECK(max_abs_diff(out1.tokens[0], out2.tokens[0]) == 0.0);
    }
    SUBCASE("zeroed value projection collapses attention to the MLP path") {
        for (auto& v : param(net, "block0.wv").data()) v = 0.0;
        TokenGrid g = net.patch_embed({img});
        TokenGrid out = net.frame_attention(0, g);
        // oracle: y = x (attention emits zero), out = y + MLP(LN2(y))
        Tensor x = g.tokens[0];
        Tensor m = layernorm(x, param(net, "block0.ln2.g"), param(net, "block0.ln2.b"));
        Tensor mlp = add_rowvec(
            matmul(gelu(add_rowvec(matmul(m, param(net, "block0.w1")), param(net, "block0.b1"))), param(net, "block0.w2")),
            param(net, "block0.b2"));
        CHECK(max_abs_diff(out.tokens[0], add(x, mlp)) < 1e-12);
    }
}

TEST_CASE("global_attention") {
    std::mt19937_64 rng(13);
    MVInverseNet net(tiny_config(), 6);
    Tensor img = random_image(16, 16, rng);
    SUBCASE("single view collapses to frame attention") {
        TokenGrid g = net.patch_embed({img});
        CHECK(max_abs_diff(net.global_attention(1, g).tokens[0], net.frame_attention(1, g).tokens[0]) == 0.0);
    }
    SUBCASE("view permutation permutes outputs") {
        Tensor img2 = random_image(16, 16, rng), img3 = random_image(16, 16, rng);
        TokenGrid a = net.patch_embed({img, img2, img3});
        TokenGrid b = net.patch_embed({img3, img, img2});
        TokenGrid oa = net.global_attention(1, a);
        TokenGrid ob = net.global_attention(1, b);
        CHECK(max_abs_diff(oa.tokens[0], ob.tokens[1]) < 1e-6);
        CHECK(max_abs_diff(oa.tokens[1], ob.tokens[2]) < 1e-6);
        CHECK(max_abs_diff(oa.tokens[2], ob.tokens[0]) < 1e-6);
    }
    SUBCASE("cross-view mixing is live") {
        TokenGrid lone = net.patch_embed({img});
        TokenGrid pair = net.patch_embed({img, Tensor::zeros({3, 16, 16})});
        Tensor global_out = net.global_attention(1, pair).tokens[0];
        Tensor frame_out = net.frame_attention(1, lone).tokens[0];
        CHECK(max_abs_diff(global_out, frame_out) > 1e-8);
    }
}

TEST_CASE("forward output contracts") {
    std::mt19937_64 rng(17);
    MVInverseNet net(tiny_config(), 7);
    SUBCASE("shapes, ranges and unit normals across view counts") {
        for (int n : {1, 2, 3, 5, 12}) {
            std::vector<Tensor> images;
            for (int i = 0; i < n; ++i) images.push_back(random_image(16, 16, rng));
            IntrinsicSet out = net.forward(images);
            REQUIRE(out.num_views() == static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) {
                CHECK(out.albedo[static_cast<size_t>(i)].shape() == Shape{3, 16, 16});
                CHECK(out.metallic[static_cast<size_t>(i)].shape() == Shape{1, 16, 16});
                CHECK(out.roughness[static_cast<size_t>(i)].shape() == Shape{1, 16, 16});
                CHECK(out.normal[static_cast<size_t>(i)].shape() == Shape{3, 16, 16});
                CHECK(out.shading[static_cast<size_t>(i)].shape() == Shape{3, 16, 16});
                for (const Tensor* t : {&out.albedo[static_cast<size_t>(i)], &out.metallic[static_cast<size_t>(i)],
                                        &out.roughness[static_cast<size_t>(i)], &out.shading[static_cast<size_t>(i)]})
                    for (double v : t->data()) {
                        CHECK(v >= 0.0);
                        CHECK(v <= 1.0);
                    }
                const Tensor& nm = out.normal[static_cast<size_t>(i)];
                for (long long p = 0; p < 256; ++p) {
                    const double norm = std::sqrt(nm.at(p) * nm.at(p) + nm.at(256 + p) * nm.at(256 + p) +
                                                  nm.at(512 + p) * nm.at(512 + p));
                    CHECK(std::fabs(norm - 1.0) < 1e-6);
                }
            }
        }
    }
    SUBCASE("empty sequence rejected") { CHECK_THROWS_AS(net.forward({}), ContractError); }
    SUBCASE("deterministic") {
        std::vector<Tensor> images{random_image(16, 16, rng), random_image(16, 16, rng)};
        IntrinsicSet a = net.forward(images);
        IntrinsicSet b = net.forward(images);
        CHECK(max_abs_diff(a.albedo[0], b.albedo[0]) == 0.0);
    }
}

TEST_CASE("forward is view-permutation equivariant") {
    std::mt19937_64 rng(19);
    MVInverseNet net(tiny_config(), 8);
    std::vector<Tensor> images{random_image(16, 16, rng), random_image(16, 16, rng), random_image(16, 16, rng)};
    IntrinsicSet out = net.forward(images);
    IntrinsicSet perm = net.forward({images[2], images[0], images[1]});
    const size_t map_to[3] = {1, 2, 0};  // view i of `images` sits at map_to[i] in the permuted batch
    for (size_t i = 0; i < 3; ++i) {
        CHECK(max_abs_diff(out.albedo[i], perm.albedo[map_to[i]]) < 1e-6);
        CHECK(max_abs_diff(out.metallic[i], perm.metallic[map_to[i]]) < 1e-6);
        CHECK(max_abs_diff(out.roughness[i], perm.roughness[map_to[i]]) < 1e-6);
        CHECK(max_abs_diff(out.normal[i], perm.normal[map_to[i]]) < 1e-6);
        CHECK(max_abs_diff(out.shading[i], perm.shading[map_to[i]]) < 1e-6);
    }
}

TEST_CASE("duplicated views yield identical per-view outputs") {
    std::mt19937_64 rng(23);
    MVInverseNet net(tiny_config(), 9);
    Tensor img = random_image(16, 16, rng);
    IntrinsicSet out = net.forward({img, img});
    CHECK(max_abs_diff(out.albedo[0], out.albedo[1]) < 1e-12);
    CHECK(max_abs_diff(out.normal[0], out.normal[1]) < 1e-12);
    CHECK(max_abs_diff(out.shading[0], out.shading[1]) < 1e-12);
}

TEST_CASE("auxiliary pyramid skip path is live") {
    std::mt19937_64 rng(29);
    MVInverseNet net(tiny_config(), 10);
    std::vector<Tensor> images{random_image(16, 16, rng)};
    IntrinsicSet base = net.forward(images);
    net.set_aux_scale(0.0);
    IntrinsicSet ablated = net.forward(images);
    net.set_aux_scale(1.0);
    CHECK(max_abs_diff(base.albedo[0], ablated.albedo[0]) > 1e-8);
}

TEST_CASE("gradient flows to parameters everywhere in the network") {
    std::mt19937_64 rng(31);
    MVInverseNet net(tiny_config(), 11);
    std::vector<Tensor> images{random_image(16, 16, rng), random_image(16, 16, rng)};
    auto f = [&] {
        IntrinsicSet out = net.forward(images);
        Tensor acc = Tensor::scalar(0.0);
        for (size_t i = 0; i < out.num_views(); ++i) {
            acc = add(acc, sum(out.albedo[i]));
            acc = add(acc, sum(out.metallic[i]));
            acc = add(acc, sum(out.roughness[i]));
            acc = add(acc, sum(out.normal[i]));
            acc = add(acc, sum(out.shading[i]));
        }
        return acc;
    };
    auto all_params = net.named_params();
    // probe a spread of parameters from embed, attention, fusion and heads
    std::vector<std::string> names{"embed.w",  "embed.pos", "block0.wv", "block1.wq", "block3.w2",
                                   "aux.l2.w", "fusion.albedo.l0.proj.w", "fusion.metallic.l1.aux.w",
                                   "fusion.shading.up1.w", "fusion.normal.trunk.w", "head.normal.w"};
    std::vector<Tensor> probe;
    for (const auto& want : names)
        for (auto& [n, t] : all_params)
            if (n == want) probe.push_back(t);
    REQUIRE(probe.size() == names.size());
    net.zero_grads();
    CHECK(gradcheck_max_rel_err(probe, f, rng, 3) < 1e-4);
}

TEST_CASE("tap depths are evenly spaced and end at the last block") {
    ModelConfig cfg = tiny_config();
    MVInverseNet net4(cfg, 12);
    CHECK(net4.tap_blocks() == std::vector<int>{0, 1, 2, 3});
    cfg.num_blocks = 8;
    MVInverseNet net8(cfg, 12);
    CHECK(net8.tap_blocks() == std::vector<int>{1, 3, 5, 7});
}
