#include "mvir/model.hpp"

#include <cmath>

namespace mvir {

void ModelConfig::validate() const {
    if (num_blocks < 2 || num_blocks % 2 != 0)
        throw ConfigError("ModelConfig: num_blocks must be even and >= 2, got " + std::to_string(num_blocks));
    if (embed_dim % num_heads != 0)
        throw ConfigError("ModelConfig: embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                          std::to_string(num_heads));
    if (image_h % patch_size != 0 || image_w % patch_size != 0)
        throw ConfigError("ModelConfig: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                          " not divisible by patch size " + std::to_string(patch_size));
    if (head_channels.size() != 4) throw ConfigError("ModelConfig: head_channels must list 4 scales");
    for (int c : head_channels)
        if (c < 1) throw ConfigError("ModelConfig: head_channels entries must be positive");
}

IntrinsicSet IntrinsicSet::detach_copy() const {
    IntrinsicSet out;
    auto cp = [](const std::vector<Tensor>& src) {
        std::vector<Tensor> dst;
        dst.reserve(src.size());
        for (const auto& t : src) dst.push_back(t.detach_copy());
        return dst;
    };
    out.albedo = cp(albedo);
    out.metallic = cp(metallic);
    out.roughness = cp(roughness);
    out.normal = cp(normal);
    out.shading = cp(shading);
    return out;
}

MVInverseNet::MVInverseNet(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const int c = cfg_.embed_dim;
    const int p = cfg_.patch_size;
    const int t = cfg_.tokens_per_view();
    const double w_std = 0.02;

    embed_w_ = Tensor::randn({p * p * 3, c}, rng, w_std);
    embed_b_ = Tensor::zeros({c}, true);
    pos_ = Tensor::randn({t, c}, rng, w_std);

    blocks_.resize(static_cast<size_t>(cfg_.num_blocks));
    for (auto& blk : blocks_) {
        blk.ln1_g = Tensor::ones({c}, true);
        blk.ln1_b = Tensor::zeros({c}, true);
        blk.wq = Tensor::randn({c, c}, rng, w_std);
        blk.bq = Tensor::zeros({c}, true);
        blk.wk = Tensor::randn({c, c}, rng, w_std);
        blk.bk = Tensor::zeros({c}, true);
        blk.wv = Tensor::randn({c, c}, rng, w_std);
        blk.bv = Tensor::zeros({c}, true);
        blk.wo = Tensor::randn({c, c}, rng, w_std);
        blk.bo = Tensor::zeros({c}, true);
        blk.ln2_g = Tensor::ones({c}, true);
        blk.ln2_b = Tensor::zeros({c}, true);
        blk.w1 = Tensor::randn({c, 4 * c}, rng, w_std);
        blk.b1 = Tensor::zeros({4 * c}, true);
        blk.w2 = Tensor::randn({4 * c, c}, rng, w_std);
        blk.b2 = Tensor::zeros({c}, true);
    }

    // He-scaled init for the conv stack: unlike the residual attention blocks
    // the fusion pyramid has no skip-normalized stream, so a flat 0.02 std
    // shrinks both signal and gradient by ~w_std*sqrt(fan_in) per layer and
    // the heads start effectively dead.
    auto he = [](int fan_in) { return std::sqrt(2.0 / fan_in); };
    const auto& hc = cfg_.head_channels;
    tap_proj_w_.resize(5);
    tap_proj_b_.resize(5);
    aux_adapt_w_.resize(5);
    aux_adapt_b_.resize(5);
    fuse_w_.resize(5);
    fuse_b_.resize(5);
    up_w_.resize(5);
    up_b_.resize(5);
    for (int hidx = 0; hidx < 5; ++hidx) {
        for (int k = 0; k < 4; ++k) {
            tap_proj_w_[static_cast<size_t>(hidx)].push_back(Tensor::randn({hc[static_cast<size_t>(k)], c, 1, 1}, rng, he(c)));
            tap_proj_b_[static_cast<size_t>(hidx)].push_back(Tensor::zeros({hc[static_cast<size_t>(k)]}, true));
            aux_adapt_w_[static_cast<size_t>(hidx)].push_back(Tensor::randn(
                {hc[static_cast<size_t>(k)], hc[static_cast<size_t>(k)], 1, 1}, rng, he(hc[static_cast<size_t>(k)])));
            aux_adapt_b_[static_cast<size_t>(hidx)].push_back(Tensor::zeros({hc[static_cast<size_t>(k)]}, true));
            fuse_w_[static_cast<size_t>(hidx)].push_back(Tensor::randn(
                {hc[static_cast<size_t>(k)], hc[static_cast<size_t>(k)], 3, 3}, rng, he(hc[static_cast<size_t>(k)] * 9)));
            fuse_b_[static_cast<size_t>(hidx)].push_back(Tensor::zeros({hc[static_cast<size_t>(k)]}, true));
        }
        for (int k = 0; k < 3; ++k) {  // level k+1 -> level k channel adapter
            up_w_[static_cast<size_t>(hidx)].push_back(Tensor::randn(
                {hc[static_cast<size_t>(k)], hc[static_cast<size_t>(k + 1)], 1, 1}, rng, he(hc[static_cast<size_t>(k + 1)])));
            up_b_[static_cast<size_t>(hidx)].push_back(Tensor::zeros({hc[static_cast<size_t>(k)]}, true));
        }
    }
    for (int k = 0; k < 4; ++k) {
        // level 0 sees rgb plus per-pixel chromaticity (channel-normalized
        // rgb): under diffuse shading the chromaticity is shading-free, which
        // shortens the path from pixels to reflectance by a large margin
        const int cin = (k == 0) ? 6 : hc[static_cast<size_t>(k - 1)];
        aux_w_.push_back(Tensor::randn({hc[static_cast<size_t>(k)], cin, 3, 3}, rng, he(cin * 9)));
        aux_b_.push_back(Tensor::zeros({hc[static_cast<size_t>(k)]}, true));
    }
    const int f0 = hc[0];
    for (int k = 0; k < 5; ++k) {
        trunk_w_.push_back(Tensor::randn({f0, f0, 3, 3}, rng, he(f0 * 9)));
        trunk_b_.push_back(Tensor::zeros({f0}, true));
    }
    const int fh = f0 + 6;  // fused features + raw image + chromaticity
    const double head_std = std::sqrt(1.0 / (fh * 9));  // no relu after the heads
    head_albedo_w_ = Tensor::randn({3, fh, 3, 3}, rng, head_std);
    head_albedo_b_ = Tensor::zeros({3}, true);
    head_metallic_w_ = Tensor::randn({1, fh, 3, 3}, rng, head_std);
    head_metallic_b_ = Tensor::zeros({1}, true);
    head_rough_w_ = Tensor::randn({1, fh, 3, 3}, rng, head_std);
    head_rough_b_ = Tensor::zeros({1}, true);
    head_normal_w_ = Tensor::randn({3, fh, 3, 3}, rng, head_std);
    head_normal_b_ = Tensor::zeros({3}, true);
    head_shading_w_ = Tensor::randn({3, fh, 3, 3}, rng, head_std);
    head_shading_b_ = Tensor::zeros({3}, true);
}

std::vector<int> MVInverseNet::tap_blocks() const {
    // 4 evenly spaced depths, shallow to deep; deepest tap is the last block.
    std::vector<int> taps;
    for (int j = 1; j <= 4; ++j) taps.push_back((j * cfg_.num_blocks + 3) / 4 - 1);
    return taps;
}

TokenGrid MVInverseNet::patch_embed(const std::vector<Tensor>& images) const {
    if (images.empty()) throw ContractError("patch_embed: empty view sequence");
    TokenGrid grid;
    grid.grid_h = cfg_.grid_h();
    grid.grid_w = cfg_.grid_w();
    for (const auto& img : images) {
        if (img.ndim() != 3 || img.dim(0) != 3 || img.dim(1) != cfg_.image_h || img.dim(2) != cfg_.image_w)
            throw ConfigError("patch_embed: image shape " + shape_str(img.shape()) + " does not match config " +
                              std::to_string(cfg_.image_h) + "x" + std::to_string(cfg_.image_w));
        Tensor patches = patchify(img, cfg_.patch_size);
        Tensor tok = add(add_rowvec(matmul(patches, embed_w_), embed_b_), pos_);
        grid.tokens.push_back(std::move(tok));
    }
    return grid;
}

Tensor MVInverseNet::attention_mlp(const Block& blk, const Tensor& x) const {
    const int c = cfg_.embed_dim;
    const int heads = cfg_.num_heads;
    const int hd = c / heads;
    Tensor h = layernorm(x, blk.ln1_g, blk.ln1_b);
    Tensor q = add_rowvec(matmul(h, blk.wq), blk.bq);
    Tensor k = add_rowvec(matmul(h, blk.wk), blk.bk);
    Tensor v = add_rowvec(matmul(h, blk.wv), blk.bv);
    std::vector<Tensor> ctx;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int hh = 0; hh < heads; ++hh) {
        Tensor qh = slice_cols(q, hh * hd, (hh + 1) * hd);
        Tensor kh = slice_cols(k, hh * hd, (hh + 1) * hd);
        Tensor vh = slice_cols(v, hh * hd, (hh + 1) * hd);
        Tensor att = softmax(scale(matmul(qh, transpose2d(kh)), inv_sqrt), 1);
        ctx.push_back(matmul(att, vh));
    }
    Tensor attn_out = add_rowvec(matmul(concat_cols(ctx), blk.wo), blk.bo);
    Tensor y = add(x, attn_out);
    Tensor m = layernorm(y, blk.ln2_g, blk.ln2_b);
    Tensor mlp = add_rowvec(matmul(gelu(add_rowvec(matmul(m, blk.w1), blk.b1)), blk.w2), blk.b2);
    return add(y, mlp);
}

TokenGrid MVInverseNet::frame_attention(int block, const TokenGrid& x) const {
    const Block& blk = blocks_[static_cast<size_t>(block)];
    TokenGrid out{{}, x.grid_h, x.grid_w};
    for (const auto& tok : x.tokens) out.tokens.push_back(attention_mlp(blk, tok));
    return out;
}

TokenGrid MVInverseNet::global_attention(int block, const TokenGrid& x) const {
    const Block& blk = blocks_[static_cast<size_t>(block)];
    const int t = x.tokens[0].dim(0);
    Tensor all = x.tokens.size() == 1 ? x.tokens[0] : concat_rows(x.tokens);
    Tensor y = attention_mlp(blk, all);
    TokenGrid out{{}, x.grid_h, x.grid_w};
    if (x.tokens.size() == 1) {
        out.tokens.push_back(std::move(y));
    } else {
        for (size_t i = 0; i < x.tokens.size(); ++i)
            out.tokens.push_back(slice_rows(y, static_cast<int>(i) * t, static_cast<int>(i + 1) * t));
    }
    return out;
}

Tensor MVInverseNet::reassemble(int head, const Tensor& tokens, int level, int out_h, int out_w) const {
    // [T,C] -> [C,gh,gw] -> 1x1 projection -> resize to the fusion level.
    Tensor grid = reshape(transpose2d(tokens), {cfg_.embed_dim, cfg_.grid_h(), cfg_.grid_w()});
    Tensor proj = conv2d(grid, tap_proj_w_[static_cast<size_t>(head)][static_cast<size_t>(level)],
                         tap_proj_b_[static_cast<size_t>(head)][static_cast<size_t>(level)], 1, 0);
    if (proj.dim(1) == out_h && proj.dim(2) == out_w) return proj;
    return bilinear_resize(proj, out_h, out_w);
}

IntrinsicSet MVInverseNet::fuse_and_head(const std::vector<TokenGrid>& taps, const std::vector<Tensor>& images) const {
    if (taps.size() != 4) throw ContractError("fuse_and_head: expected 4 backbone taps");
    IntrinsicSet out;
    for (size_t view = 0; view < images.size(); ++view) {
        // Auxiliary multi-resolution pyramid over the raw image (full, 1/2, 1/4, 1/8).
        std::vector<Tensor> aux(4);
        const Tensor& img = images[view];
        const int ih = img.dim(1), iw = img.dim(2);
        const Tensor chroma = normalize_channels(img);
        const Tensor img6 = reshape(concat_rows({reshape(img, {3, ih * iw}), reshape(chroma, {3, ih * iw})}),
                                    {6, ih, iw});
        aux[0] = relu(conv2d(img6, aux_w_[0], aux_b_[0], 1, 1));
        for (int k = 1; k < 4; ++k)
            aux[static_cast<size_t>(k)] =
                relu(conv2d(aux[static_cast<size_t>(k - 1)], aux_w_[static_cast<size_t>(k)], aux_b_[static_cast<size_t>(k)], 2, 1));
        if (aux_scale_ != 1.0)
            for (auto& a : aux) a = scale(a, aux_scale_);

        // Per-head pyramid: deepest level first, then progressive upsampling
        // with tap + aux skips, a trunk conv, and the output projection.
        auto head_in = [&](int hd) {
            const size_t h = static_cast<size_t>(hd);
            Tensor x;
            for (int k = 3; k >= 0; --k) {
                const int lh = aux[static_cast<size_t>(k)].dim(1), lw = aux[static_cast<size_t>(k)].dim(2);
                Tensor tap = reassemble(hd, taps[static_cast<size_t>(k)].tokens[view], k, lh, lw);
                Tensor skip = add(tap, conv2d(aux[static_cast<size_t>(k)], aux_adapt_w_[h][static_cast<size_t>(k)],
                                              aux_adapt_b_[h][static_cast<size_t>(k)], 1, 0));
                if (k == 3) {
                    x = skip;
                } else {
                    Tensor up = bilinear_resize(x, lh, lw);
                    up = conv2d(up, up_w_[h][static_cast<size_t>(k)], up_b_[h][static_cast<size_t>(k)], 1, 0);
                    x = add(up, skip);
                }
                x = relu(conv2d(x, fuse_w_[h][static_cast<size_t>(k)], fuse_b_[h][static_cast<size_t>(k)], 1, 1));
            }
            x = relu(conv2d(x, trunk_w_[h], trunk_b_[h], 1, 1));
            // The output convolution sees the raw image + chromaticity next
            // to the fused features: reflectance-like quantities are almost
            // local functions of the pixel, and the direct path lets the
            // heads pick that up without waiting for the pyramid to learn a
            // pass-through.
            const int f0 = x.dim(0);
            return reshape(concat_rows({reshape(x, {f0, ih * iw}), reshape(img6, {6, ih * iw})}), {f0 + 6, ih, iw});
        };
        out.albedo.push_back(sigmoid(conv2d(head_in(0), head_albedo_w_, head_albedo_b_, 1, 1)));
        out.metallic.push_back(sigmoid(conv2d(head_in(1), head_metallic_w_, head_metallic_b_, 1, 1)));
        out.roughness.push_back(sigmoid(conv2d(head_in(2), head_rough_w_, head_rough_b_, 1, 1)));
        out.normal.push_back(normalize_channels(conv2d(head_in(3), head_normal_w_, head_normal_b_, 1, 1)));
        out.shading.push_back(sigmoid(conv2d(head_in(4), head_shading_w_, head_shading_b_, 1, 1)));
    }
    return out;
}

IntrinsicSet MVInverseNet::forward(const std::vector<Tensor>& images) const {
    if (images.empty()) throw ContractError("forward: empty view sequence");
    TokenGrid x = patch_embed(images);
    const std::vector<int> tap_at = tap_blocks();
    std::vector<TokenGrid> taps(4);
    for (int b = 0; b < cfg_.num_blocks; ++b) {
        x = (b % 2 == 0) ? frame_attention(b, x) : global_attention(b, x);
        for (int j = 0; j < 4; ++j)
            if (tap_at[static_cast<size_t>(j)] == b) taps[static_cast<size_t>(j)] = x;
    }
    return fuse_and_head(taps, images);
}

std::vector<std::pair<std::string, Tensor>> MVInverseNet::named_params() {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embed.w", embed_w_);
    out.emplace_back("embed.b", embed_b_);
    out.emplace_back("embed.pos", pos_);
    for (size_t i = 0; i < blocks_.size(); ++i) {
        auto& blk = blocks_[i];
        const std::string p = "block" + std::to_string(i) + ".";
        out.emplace_back(p + "ln1.g", blk.ln1_g);
        out.emplace_back(p + "ln1.b", blk.ln1_b);
        out.emplace_back(p + "wq", blk.wq);
        out.emplace_back(p + "bq", blk.bq);
        out.emplace_back(p + "wk", blk.wk);
        out.emplace_back(p + "bk", blk.bk);
        out.emplace_back(p + "wv", blk.wv);
        out.emplace_back(p + "bv", blk.bv);
        out.emplace_back(p + "wo", blk.wo);
        out.emplace_back(p + "bo", blk.bo);
        out.emplace_back(p + "ln2.g", blk.ln2_g);
        out.emplace_back(p + "ln2.b", blk.ln2_b);
        out.emplace_back(p + "w1", blk.w1);
        out.emplace_back(p + "b1", blk.b1);
        out.emplace_back(p + "w2", blk.w2);
        out.emplace_back(p + "b2", blk.b2);
    }
    for (int k = 0; k < 4; ++k) {
        const std::string p = "aux.l" + std::to_string(k) + ".";
        out.emplace_back(p + "w", aux_w_[static_cast<size_t>(k)]);
        out.emplace_back(p + "b", aux_b_[static_cast<size_t>(k)]);
    }
    static const char* kHeadNames[5] = {"albedo", "metallic", "roughness", "normal", "shading"};
    for (int hd = 0; hd < 5; ++hd) {
        const size_t h = static_cast<size_t>(hd);
        const std::string hp = std::string("fusion.") + kHeadNames[hd] + ".";
        for (int k = 0; k < 4; ++k) {
            const std::string p = hp + "l" + std::to_string(k) + ".";
            out.emplace_back(p + "proj.w", tap_proj_w_[h][static_cast<size_t>(k)]);
            out.emplace_back(p + "proj.b", tap_proj_b_[h][static_cast<size_t>(k)]);
            out.emplace_back(p + "aux.w", aux_adapt_w_[h][static_cast<size_t>(k)]);
            out.emplace_back(p + "aux.b", aux_adapt_b_[h][static_cast<size_t>(k)]);
            out.emplace_back(p + "fuse.w", fuse_w_[h][static_cast<size_t>(k)]);
            out.emplace_back(p + "fuse.b", fuse_b_[h][static_cast<size_t>(k)]);
        }
        for (int k = 0; k < 3; ++k) {
            const std::string p = hp + "up" + std::to_string(k) + ".";
            out.emplace_back(p + "w", up_w_[h][static_cast<size_t>(k)]);
            out.emplace_back(p + "b", up_b_[h][static_cast<size_t>(k)]);
        }
        out.emplace_back(hp + "trunk.w", trunk_w_[h]);
        out.emplace_back(hp + "trunk.b", trunk_b_[h]);
    }
    out.emplace_back("head.albedo.w", head_albedo_w_);
    out.emplace_back("head.albedo.b", head_albedo_b_);
    out.emplace_back("head.metallic.w", head_metallic_w_);
    out.emplace_back("head.metallic.b", head_metallic_b_);
    out.emplace_back("head.roughness.w", head_rough_w_);
    out.emplace_back("head.roughness.b", head_rough_b_);
    out.emplace_back("head.normal.w", head_normal_w_);
    out.emplace_back("head.normal.b", head_normal_b_);
    out.emplace_back("head.shading.w", head_shading_w_);
    out.emplace_back("head.shading.b", head_shading_b_);
    return out;
}

std::vector<std::pair<std::string, const Tensor>> MVInverseNet::named_params() const {
    auto mutable_view = const_cast<MVInverseNet*>(this)->named_params();
    std::vector<std::pair<std::string, const Tensor>> out;
    out.reserve(mutable_view.size());
    for (auto& [name, t] : mutable_view) out.emplace_back(name, t);
    return out;
}

void MVInverseNet::zero_grads() {
    for (auto& [name, t] : named_params()) t.zero_grad();
}

}  // namespace mvir
