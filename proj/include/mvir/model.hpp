#pragma once

#include <string>
#include <vector>

#include "mvir/tensor.hpp"

namespace mvir {

struct ModelConfig {
    int patch_size = 8;
    int embed_dim = 64;
    int num_blocks = 4;  // must be even: frame-wise / global alternation pairs
    int num_heads = 4;
    // Fusion pyramid channels at full, 1/2, 1/4 and 1/8 resolution.
    std::vector<int> head_channels = {16, 16, 16, 16};
    int image_h = 64;
    int image_w = 64;

    void validate() const;
    int grid_h() const { return image_h / patch_size; }
    int grid_w() const { return image_w / patch_size; }
    int tokens_per_view() const { return grid_h() * grid_w(); }
};

/// Patch tokens for a view sequence; tokens[i] is [T, C].
struct TokenGrid {
    std::vector<Tensor> tokens;
    int grid_h = 0;
    int grid_w = 0;
};

/// Per-view intrinsic maps. albedo/normal/shading are [3,H,W], metallic and
/// roughness [1,H,W]. Normals are unit per pixel, bounded maps sigmoid-[0,1].
struct IntrinsicSet {
    std::vector<Tensor> albedo;
    std::vector<Tensor> metallic;
    std::vector<Tensor> roughness;
    std::vector<Tensor> normal;
    std::vector<Tensor> shading;

    size_t num_views() const { return albedo.size(); }
    IntrinsicSet detach_copy() const;
};

/// Alternating frame-wise/global attention backbone with DPT-style fusion
/// heads and an auxiliary strided-conv pyramid over the raw image.
class MVInverseNet {
public:
    MVInverseNet(ModelConfig cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }

    /// images: one [3,H,W] tensor per view, values in [0,1].
    IntrinsicSet forward(const std::vector<Tensor>& images) const;

    TokenGrid patch_embed(const std::vector<Tensor>& images) const;
    TokenGrid frame_attention(int block, const TokenGrid& x) const;
    TokenGrid global_attention(int block, const TokenGrid& x) const;
    IntrinsicSet fuse_and_head(const std::vector<TokenGrid>& taps, const std::vector<Tensor>& images) const;

    /// Indices (into the block sequence) whose outputs feed the fusion head,
    /// shallow to deep; 4 evenly spaced depths.
    std::vector<int> tap_blocks() const;

    /// Stable-ordered (name, parameter) view used by the optimizer and the
    /// checkpoint format.
    std::vector<std::pair<std::string, Tensor>> named_params();
    std::vector<std::pair<std::string, const Tensor>> named_params() const;

    void zero_grads();

    /// Scales the auxiliary pyramid contribution; 1 normally, 0 ablates it.
    void set_aux_scale(double s) { aux_scale_ = s; }

private:
    struct Block {
        Tensor ln1_g, ln1_b;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_g, ln2_b;
        Tensor w1, b1, w2, b2;
    };

    Tensor attention_mlp(const Block& blk, const Tensor& x) const;
    Tensor reassemble(int head, const Tensor& tokens, int level, int out_h, int out_w) const;

    ModelConfig cfg_;
    double aux_scale_ = 1.0;

    Tensor embed_w_, embed_b_, pos_;
    std::vector<Block> blocks_;
    // One fusion pyramid per intrinsic head (albedo, metallic, roughness,
    // normal, shading): the five targets want very different functions of the
    // backbone features, and sharing one pyramid makes their gradients fight —
    // in particular the near-constant metallic/roughness targets reward
    // flattening shared features that the albedo head needs. Only the
    // attention backbone and the auxiliary image pyramid are shared.
    std::vector<std::vector<Tensor>> tap_proj_w_, tap_proj_b_;  // [head][level] 1x1 conv
    std::vector<Tensor> aux_w_, aux_b_;                         // shared strided-conv pyramid
    // Per-head 1x1 adapters on the aux skips: a head that has no use for the
    // image pyramid can silence its own adapter instead of pushing the shared
    // aux features toward zero.
    std::vector<std::vector<Tensor>> aux_adapt_w_, aux_adapt_b_;  // [head][level]
    std::vector<std::vector<Tensor>> fuse_w_, fuse_b_;          // [head][level] 3x3 conv
    std::vector<std::vector<Tensor>> up_w_, up_b_;              // [head][level] 1x1 adapters
    std::vector<Tensor> trunk_w_, trunk_b_;                     // [head] 3x3 conv
    Tensor head_albedo_w_, head_albedo_b_;
    Tensor head_metallic_w_, head_metallic_b_;
    Tensor head_rough_w_, head_rough_b_;
    Tensor head_normal_w_, head_normal_b_;
    Tensor head_shading_w_, head_shading_b_;
};

}  // namespace mvir
