#include "mvir/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mvir/brdf.hpp"
#include "mvir/geometry.hpp"
#include "mvir/io.hpp"

namespace mvir {

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("TrainConfig: learning rate must be positive");
    if (steps < 0) throw ConfigError("TrainConfig: negative step count");
    if (min_views < 1 || max_views > 12 || min_views > max_views)
        throw ConfigError("TrainConfig: views-per-batch range must lie within [1, 12]");
    if (warmup_frac < 0.0 || warmup_frac > 1.0) throw ConfigError("TrainConfig: warmup fraction outside [0, 1]");
}

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (lr < 0.0) throw ConfigError("Adam: negative learning rate");
}

void Adam::step(std::vector<std::pair<std::string, Tensor>> params) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(static_cast<size_t>(params[i].second.size()), 0.0);
            v_[i].assign(static_cast<size_t>(params[i].second.size()), 0.0);
        }
    }
    if (m_.size() != params.size()) throw ContractError("Adam::step: parameter count changed");
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].second;
        if (m_[i].size() != static_cast<size_t>(p.size()))
            throw ContractError("Adam::step: shape changed for parameter '" + params[i].first + "'");
        auto g = p.grad();
        auto d = p.data();
        for (size_t k = 0; k < m_[i].size(); ++k) {
            if (std::isnan(g[k]))
                throw ContractError("Adam::step: NaN gradient in parameter '" + params[i].first + "'");
            m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g[k];
            v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g[k] * g[k];
            d[k] -= lr_ * (m_[i][k] / bc1) / (std::sqrt(v_[i][k] / bc2) + eps_);
        }
    }
}

void Adam::restore(long long step, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
    if (m.size() != v.size()) throw ContractError("Adam::restore: mismatched moment buffers");
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
}

namespace {

constexpr char kCkptMagic[8] = {'M', 'V', 'I', 'R', 'C', 'K', '1', '\n'};

void put_i64(std::ostream& f, long long v) { f.write(reinterpret_cast<const char*>(&v), 8); }
void put_i32(std::ostream& f, int v) { f.write(reinterpret_cast<const char*>(&v), 4); }
void put_f64s(std::ostream& f, const std::vector<double>& v) {
    f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
}
void put_str(std::ostream& f, const std::string& s) {
    put_i32(f, static_cast<int>(s.size()));
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

long long get_i64(std::istream& f) {
    long long v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
int get_i32(std::istream& f) {
    int v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
std::vector<double> get_f64s(std::istream& f, size_t n) {
    std::vector<double> v(n);
    f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * 8));
    return v;
}
std::string get_str(std::istream& f) {
    const int n = get_i32(f);
    if (n < 0 || n > (1 << 20)) throw IoError("checkpoint: implausible string length");
    std::string s(static_cast<size_t>(n), '\0');
    f.read(s.data(), n);
    return s;
}

}  // namespace

Checkpoint make_checkpoint(const MVInverseNet& model, const Adam* opt, const std::mt19937_64* rng) {
    Checkpoint ck;
    ck.config = model.config();
    for (const auto& [name, t] : model.named_params())
        ck.params.emplace_back(name, std::vector<double>(t.data().begin(), t.data().end()));
    if (opt) {
        ck.adam_m = opt->moment1();
        ck.adam_v = opt->moment2();
        ck.opt_step = opt->step_count();
    }
    if (rng) {
        std::ostringstream oss;
        oss << *rng;
        ck.rng_state = oss.str();
    }
    return ck;
}

void apply_checkpoint(const Checkpoint& ck, MVInverseNet& model, Adam* opt, std::mt19937_64* rng) {
    const ModelConfig& a = ck.config;
    const ModelConfig& b = model.config();
    if (a.patch_size != b.patch_size || a.embed_dim != b.embed_dim || a.num_blocks != b.num_blocks ||
        a.num_heads != b.num_heads || a.head_channels != b.head_channels || a.image_h != b.image_h ||
        a.image_w != b.image_w)
        throw ConfigError("apply_checkpoint: model config mismatch");
    auto params = model.named_params();
    if (params.size() != ck.params.size()) throw ContractError("apply_checkpoint: parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        if (params[i].first != ck.params[i].first)
            throw ContractError("apply_checkpoint: parameter order mismatch at '" + params[i].first + "'");
        if (static_cast<size_t>(params[i].second.size()) != ck.params[i].second.size())
            throw ContractError("apply_checkpoint: size mismatch for '" + params[i].first + "'");
        std::copy(ck.params[i].second.begin(), ck.params[i].second.end(), params[i].second.data().begin());
    }
    if (opt && !ck.adam_m.empty()) opt->restore(ck.opt_step, ck.adam_m, ck.adam_v);
    if (rng && !ck.rng_state.empty()) {
        std::istringstream iss(ck.rng_state);
        iss >> *rng;
        if (!iss) throw IoError("apply_checkpoint: corrupt RNG state");
    }
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("save_checkpoint: cannot open " + path);
    f.write(kCkptMagic, 8);
    put_i32(f, ck.config.patch_size);
    put_i32(f, ck.config.embed_dim);
    put_i32(f, ck.config.num_blocks);
    put_i32(f, ck.config.num_heads);
    put_i32(f, static_cast<int>(ck.config.head_channels.size()));
    for (int c : ck.config.head_channels) put_i32(f, c);
    put_i32(f, ck.config.image_h);
    put_i32(f, ck.config.image_w);
    put_i32(f, static_cast<int>(ck.params.size()));
    for (const auto& [name, data] : ck.params) {
        put_str(f, name);
        put_i64(f, static_cast<long long>(data.size()));
        put_f64s(f, data);
    }
    put_i32(f, ck.adam_m.empty() ? 0 : 1);
    if (!ck.adam_m.empty()) {
        if (ck.adam_m.size() != ck.params.size() || ck.adam_v.size() != ck.params.size())
            throw ContractError("save_checkpoint: optimizer state does not match parameters");
        put_i64(f, ck.opt_step);
        for (const auto& m : ck.adam_m) put_f64s(f, m);
        for (const auto& v : ck.adam_v) put_f64s(f, v);
    }
    put_str(f, ck.rng_state);
    if (!f) throw IoError("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCkptMagic, 8) != 0) throw IoError("load_checkpoint: bad magic in " + path);
    Checkpoint ck;
    ck.config.patch_size = get_i32(f);
    ck.config.embed_dim = get_i32(f);
    ck.config.num_blocks = get_i32(f);
    ck.config.num_heads = get_i32(f);
    const int nhc = get_i32(f);
    if (nhc < 0 || nhc > 16) throw IoError("load_checkpoint: implausible head channel count");
    ck.config.head_channels.resize(static_cast<size_t>(nhc));
    for (int& c : ck.config.head_channels) c = get_i32(f);
    ck.config.image_h = get_i32(f);
    ck.config.image_w = get_i32(f);
    const int np = get_i32(f);
    if (!f || np < 0 || np > (1 << 20)) throw IoError("load_checkpoint: implausible parameter count");
    for (int i = 0; i < np; ++i) {
        std::string name = get_str(f);
        const long long n = get_i64(f);
        if (!f || n < 0) throw IoError("load_checkpoint: corrupt tensor header in " + path);
        ck.params.emplace_back(std::move(name), get_f64s(f, static_cast<size_t>(n)));
    }
    if (get_i32(f) != 0) {
        ck.opt_step = get_i64(f);
        for (int i = 0; i < np; ++i) ck.adam_m.push_back(get_f64s(f, ck.params[static_cast<size_t>(i)].second.size()));
        for (int i = 0; i < np; ++i) ck.adam_v.push_back(get_f64s(f, ck.params[static_cast<size_t>(i)].second.size()));
    }
    ck.rng_state = get_str(f);
    if (!f) throw IoError("load_checkpoint: truncated file " + path);
    return ck;
}

namespace {

// GT targets + validity masks for a chosen subset of a scene's views
struct Batch {
    std::vector<Tensor> images;
    IntrinsicSet gt;
    std::vector<ValidityMask> masks;
};

Batch make_batch(const std::vector<ViewBundle>& views, const std::vector<size_t>& idx) {
    Batch b;
    for (size_t i : idx) {
        const ViewBundle& v = views[i];
        b.images.push_back(v.rgb);
        b.gt.albedo.push_back(v.albedo);
        b.gt.metallic.push_back(v.metallic);
        b.gt.roughness.push_back(v.roughness);
        b.gt.normal.push_back(v.normal_cam);
        b.gt.shading.push_back(v.shading);
        b.masks.push_back(ValidityMask::from_albedo(v.albedo, &v.mask));
    }
    return b;
}

}  // namespace

std::vector<StepRecord> train_pretrain(MVInverseNet& model, Adam& opt,
                                       const std::vector<std::vector<ViewBundle>>& scenes,
                                       const TrainConfig& cfg, std::mt19937_64& rng, std::ostream* log) {
    cfg.validate();
    if (scenes.empty()) throw ConfigError("train_pretrain: empty scene archive");
    for (const auto& s : scenes)
        if (s.empty()) throw ConfigError("train_pretrain: scene with no views");

    const int warmup_steps = static_cast<int>(std::ceil(cfg.warmup_frac * cfg.steps));
    std::vector<StepRecord> records;
    records.reserve(static_cast<size_t>(cfg.steps));
    for (int step = 0; step < cfg.steps; ++step) {
        const auto& views = scenes[std::uniform_int_distribution<size_t>(0, scenes.size() - 1)(rng)];
        const int hi = std::min<int>(cfg.max_views, static_cast<int>(views.size()));
        const int lo = std::min<int>(cfg.min_views, hi);
        const int nv = std::uniform_int_distribution<int>(lo, hi)(rng);
        std::vector<size_t> idx(views.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(static_cast<size_t>(nv));
        std::sort(idx.begin(), idx.end());

        Batch batch = make_batch(views, idx);
        StepRecord rec;
        rec.step = step;
        rec.warmup = step < warmup_steps;
        // cosine decay from the configured initial rate to zero
        opt.set_lr(cfg.lr * 0.5 * (1.0 + std::cos(kPi * step / cfg.steps)));
        Tape tape;
        {
            Tape::Scope scope(tape);
            IntrinsicSet preds = model.forward(batch.images);
            Tensor loss = composite_loss(preds, batch.gt, cfg.weights, batch.masks, cfg.msg_scales,
                                         rec.warmup, &rec.terms);
            backward(loss);
        }
        opt.step(model.named_params());
        model.zero_grads();
        records.push_back(rec);
        if (log)
            *log << format_record({{"step", static_cast<double>(step)},
                                   {"warmup", rec.warmup ? 1.0 : 0.0},
                                   {"albedo", rec.terms.albedo},
                                   {"metallic", rec.terms.metallic},
                                   {"roughness", rec.terms.roughness},
                                   {"normal", rec.terms.normal},
                                   {"shading", rec.terms.shading},
                                   {"total", rec.terms.total}})
                 << "\n";
    }
    return records;
}

std::vector<double> train_finetune(MVInverseNet& model, const MVInverseNet& frozen, Adam& opt,
                                   const std::vector<std::vector<ViewBundle>>& videos, const TrainConfig& cfg,
                                   std::mt19937_64& rng, std::ostream* log) {
    cfg.validate();
    if (videos.empty()) throw ConfigError("train_finetune: empty video archive");
    for (const auto& v : videos)
        if (v.size() < 2) throw ConfigError("train_finetune: videos need at least 2 frames");

    std::vector<double> curve;
    curve.reserve(static_cast<size_t>(cfg.steps));
    for (int step = 0; step < cfg.steps; ++step) {
        const auto& video = videos[std::uniform_int_distribution<size_t>(0, videos.size() - 1)(rng)];
        const size_t t = std::uniform_int_distribution<size_t>(0, video.size() - 2)(rng);
        if (!video[t].flow_to_next.defined() || !video[t].flow_valid.defined())
            throw ContractError("train_finetune: missing flow for frame pair " + std::to_string(t) + "->" +
                                std::to_string(t + 1));

        // frozen anchor prediction, outside any tape; it must see the same
        // triple so identical models agree on frame 0 exactly
        IntrinsicSet anchor = frozen.forward({video[0].rgb, video[t].rgb, video[t + 1].rgb});

        const Tensor& flow = video[t].flow_to_next;
        const ValidityMask warp_valid{video[t].flow_valid};
        double total = 0;
        Tape tape;
        {
            Tape::Scope scope(tape);
            IntrinsicSet preds = model.forward({video[0].rgb, video[t].rgb, video[t + 1].rgb});
            const Tensor* pred0[4] = {&preds.albedo[0], &preds.metallic[0], &preds.roughness[0],
                                      &preds.shading[0]};
            const Tensor* predt[4] = {&preds.albedo[1], &preds.metallic[1], &preds.roughness[1],
                                      &preds.shading[1]};
            const Tensor* predn[4] = {&preds.albedo[2], &preds.metallic[2], &preds.roughness[2],
                                      &preds.shading[2]};
            const Tensor* anch[4] = {&anchor.albedo[0], &anchor.metallic[0], &anchor.roughness[0],
                                     &anchor.shading[0]};
            Tensor loss;
            for (int c = 0; c < 4; ++c) {
                const Tensor warped = warp_backward(*predn[c], flow, warp_valid.mask);
                Tensor term = finetune_loss(*pred0[c], anch[c]->detach_copy(), *predt[c], warped, warp_valid,
                                            cfg.weights.anchor);
                loss = c == 0 ? term : add(loss, term);
            }
            total = loss.item();
            backward(loss);
        }
        opt.step(model.named_params());
        model.zero_grads();
        curve.push_back(total);
        if (log) *log << format_record({{"step", static_cast<double>(step)}, {"total", total}}) << "\n";
    }
    return curve;
}

}  // namespace mvir
