#pragma once

#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mvir/losses.hpp"
#include "mvir/model.hpp"
#include "mvir/scene.hpp"
#include "mvir/tensor.hpp"

namespace mvir {

struct TrainConfig {
    double lr = 5e-5;
    int steps = 300;
    int min_views = 2;
    int max_views = 12;
    double warmup_frac = 0.1;  // fraction of steps with plain-MSE albedo
    uint64_t seed = 0;
    int msg_scales = 4;
    LossWeights weights;

    void validate() const;
};

/// Bias-corrected Adam over the model's stable-ordered named parameters.
/// Moment buffers are lazily sized on the first step.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    /// One update from the parameters' accumulated grads. Missing grads count
    /// as zero; NaN grads abort naming the parameter.
    void step(std::vector<std::pair<std::string, Tensor>> params);

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    long long step_count() const { return step_; }

    // checkpoint plumbing
    const std::vector<std::vector<double>>& moment1() const { return m_; }
    const std::vector<std::vector<double>>& moment2() const { return v_; }
    void restore(long long step, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v);

private:
    double lr_, beta1_, beta2_, eps_;
    long long step_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

/// Everything needed to resume or replay a run: model config + parameters,
/// optimizer moments, step counter, RNG state. Little-endian binary file;
/// save -> load -> save is byte-identical.
struct Checkpoint {
    ModelConfig config;
    std::vector<std::pair<std::string, std::vector<double>>> params;
    std::vector<std::vector<double>> adam_m, adam_v;  // empty when no optimizer state
    long long opt_step = 0;
    std::string rng_state;  // serialized mt19937_64, empty when absent
};

Checkpoint make_checkpoint(const MVInverseNet& model, const Adam* opt = nullptr,
                           const std::mt19937_64* rng = nullptr);
/// Model config must match; optimizer/RNG restored only when present in both.
void apply_checkpoint(const Checkpoint& ck, MVInverseNet& model, Adam* opt = nullptr,
                      std::mt19937_64* rng = nullptr);
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

struct StepRecord {
    int step = 0;
    bool warmup = false;
    CompositeLossTerms terms;
};

/// Supervised pretraining: each step samples one scene and a uniform view
/// count in [min_views, max_views], runs the composite objective, and takes
/// one Adam step. Per-term records come back (and stream to `log` when set).
std::vector<StepRecord> train_pretrain(MVInverseNet& model, Adam& opt,
                                       const std::vector<std::vector<ViewBundle>>& scenes,
                                       const TrainConfig& cfg, std::mt19937_64& rng,
                                       std::ostream* log = nullptr);

/// Self-supervised consistency finetuning: each step samples a video and a
/// frame triple (0, t, t+1), runs the tuned model on the triple and the
/// frozen model on frame 0, and optimizes the warped-consistency + anchor
/// objective per intrinsic channel. Returns per-step total losses. Never
/// mutates `frozen`.
std::vector<double> train_finetune(MVInverseNet& model, const MVInverseNet& frozen, Adam& opt,
                                   const std::vector<std::vector<ViewBundle>>& videos,
                                   const TrainConfig& cfg, std::mt19937_64& rng,
                                   std::ostream* log = nullptr);

}  // namespace mvir
