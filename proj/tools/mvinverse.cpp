// mvinverse: data generation, training, evaluation, relighting and material
// editing around the mvir library. Flat key=value config file plus flag
// overrides; everything is seeded and deterministic.

#include "CLI11.hpp"

#include <Eigen/Dense>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mvir/geometry.hpp"
#include "mvir/io.hpp"
#include "mvir/losses.hpp"
#include "mvir/metrics.hpp"
#include "mvir/model.hpp"
#include "mvir/relight.hpp"
#include "mvir/scene.hpp"
#include "mvir/train.hpp"

namespace fs = std::filesystem;
using namespace mvir;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out = "out";
    std::string data;
    std::string checkpoint;
    uint64_t seed = 0;
    bool seed_set = false;
    int steps = -1;
    double lr = -1;
    std::string views_range;  // "LO..HI"
    bool deterministic = false;
};

Config load_config(const CommonOpts& o) {
    Config cfg;
    if (!o.config_path.empty()) cfg = Config::load(o.config_path);
    // flag overrides beat file values
    if (o.seed_set) cfg.set("seed", std::to_string(o.seed));
    if (o.steps >= 0) cfg.set("steps", std::to_string(o.steps));
    if (o.lr > 0) cfg.set("lr", std::to_string(o.lr));
    if (!o.data.empty()) cfg.set("data", o.data);
    if (!o.checkpoint.empty()) cfg.set("checkpoint", o.checkpoint);
    if (!o.views_range.empty()) {
        const auto dots = o.views_range.find("..");
        if (dots == std::string::npos) throw ConfigError("--views expects LO..HI, got " + o.views_range);
        cfg.set("min_views", o.views_range.substr(0, dots));
        cfg.set("max_views", o.views_range.substr(dots + 2));
    }
    if (o.deterministic) cfg.set("deterministic", "true");
    return cfg;
}

Eigen::Vector3d get_vec3(const Config& cfg, const std::string& key, const Eigen::Vector3d& fallback) {
    if (!cfg.has(key)) return fallback;
    std::istringstream iss(cfg.get_str(key, ""));
    Eigen::Vector3d v;
    iss >> v.x() >> v.y() >> v.z();
    if (!iss) throw ConfigError("config key '" + key + "': expected three numbers");
    return v;
}

ModelConfig model_config(const Config& cfg, int h, int w) {
    ModelConfig mc;
    mc.patch_size = static_cast<int>(cfg.get_int("model.patch_size", 8));
    mc.embed_dim = static_cast<int>(cfg.get_int("model.embed_dim", 64));
    mc.num_blocks = static_cast<int>(cfg.get_int("model.num_blocks", 4));
    mc.num_heads = static_cast<int>(cfg.get_int("model.num_heads", 4));
    const int hc = static_cast<int>(cfg.get_int("model.head_channels", 16));
    mc.head_channels = {hc, hc, hc, hc};
    mc.image_h = h;
    mc.image_w = w;
    mc.validate();
    return mc;
}

TrainConfig train_config(const Config& cfg) {
    TrainConfig tc;
    tc.lr = cfg.get_double("lr", tc.lr);
    tc.steps = static_cast<int>(cfg.get_int("steps", tc.steps));
    tc.min_views = static_cast<int>(cfg.get_int("min_views", tc.min_views));
    tc.max_views = static_cast<int>(cfg.get_int("max_views", tc.max_views));
    tc.warmup_frac = cfg.get_double("warmup_frac", tc.warmup_frac);
    tc.seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
    tc.msg_scales = static_cast<int>(cfg.get_int("msg_scales", tc.msg_scales));
    tc.weights.anchor = cfg.get_double("anchor_weight", tc.weights.anchor);
    tc.validate();
    return tc;
}

std::vector<std::vector<ViewBundle>> load_archive(const std::string& root) {
    std::vector<std::vector<ViewBundle>> scenes;
    for (const auto& dir : list_scene_dirs(root)) scenes.push_back(load_scene_views(dir));
    if (scenes.empty()) throw IoError("no scene_* directories under " + root);
    return scenes;
}

std::vector<CameraView> camera_views(const std::vector<ViewBundle>& views) {
    std::vector<CameraView> out;
    for (const auto& v : views) out.push_back({v.intrinsics, v.pose, v.depth});
    return out;
}

IntrinsicSet gt_preds(const std::vector<ViewBundle>& views) {
    IntrinsicSet s;
    for (const auto& v : views) {
        s.albedo.push_back(v.albedo);
        s.metallic.push_back(v.metallic);
        s.roughness.push_back(v.roughness);
        s.normal.push_back(v.normal_cam);
        s.shading.push_back(v.shading);
    }
    return s;
}

// model predictions when a checkpoint is configured, GT maps otherwise
IntrinsicSet scene_preds(const Config& cfg, const std::vector<ViewBundle>& views) {
    const std::string ckpt = cfg.get_str("checkpoint", "");
    if (ckpt.empty()) return gt_preds(views);
    Checkpoint ck = load_checkpoint(ckpt);
    MVInverseNet model(ck.config, 0);
    apply_checkpoint(ck, model);
    std::vector<Tensor> images;
    for (const auto& v : views) images.push_back(v.rgb);
    return model.forward(images);
}

int cmd_gen_data(const Config& cfg) {
    SceneGenConfig sc;
    sc.difficulty = difficulty_from_string(cfg.get_str("difficulty", "easy"));
    sc.num_views = static_cast<int>(cfg.get_int("views", 8));
    sc.height = static_cast<int>(cfg.get_int("res", 64));
    sc.width = sc.height;
    const int n = static_cast<int>(cfg.get_int("scenes", 4));
    const uint64_t seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
    const std::string out = cfg.get_str("out", "out");
    fs::create_directories(out);
    for (int i = 0; i < n; ++i) {
        SceneSpec scene = gen_scene(seed + static_cast<uint64_t>(i), sc);
        std::vector<ViewBundle> views = render_sequence(scene, sc.height, sc.width);
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%04d", i);
        save_scene_views(out + "/" + name, scene.intrinsics, views);
    }
    std::cout << "wrote " << n << " scenes to " << out << "\n";
    return 0;
}

int cmd_train(const Config& cfg) {
    TrainConfig tc = train_config(cfg);
    auto scenes = load_archive(cfg.get_str("data", "data"));
    const int h = scenes[0][0].depth.dim(0), w = scenes[0][0].depth.dim(1);
    MVInverseNet model(model_config(cfg, h, w), tc.seed);
    Adam opt(tc.lr);
    std::mt19937_64 rng(tc.seed);
    const std::string out = cfg.get_str("out", "out");
    fs::create_directories(out);
    std::ofstream log(out + "/train_log.txt");
    auto records = train_pretrain(model, opt, scenes, tc, rng, &log);
    save_checkpoint(out + "/pretrained.ckpt", make_checkpoint(model, &opt, &rng));
    if (!records.empty())
        std::cout << format_record({{"steps", static_cast<double>(records.size())},
                                    {"first_total", records.front().terms.total},
                                    {"last_total", records.back().terms.total}})
                  << "\n";
    std::cout << "checkpoint: " << out << "/pretrained.ckpt\n";
    return 0;
}

int cmd_finetune(const Config& cfg) {
    TrainConfig tc = train_config(cfg);
    auto videos = load_archive(cfg.get_str("data", "data"));
    const std::string ckpt = cfg.get_str("checkpoint", "");
    if (ckpt.empty()) throw ConfigError("finetune needs checkpoint=PATH (the pretrained model)");
    Checkpoint ck = load_checkpoint(ckpt);
    MVInverseNet model(ck.config, 0), frozen(ck.config, 0);
    apply_checkpoint(ck, model);
    apply_checkpoint(ck, frozen);
    Adam opt(tc.lr);
    std::mt19937_64 rng(tc.seed);
    const std::string out = cfg.get_str("out", "out");
    fs::create_directories(out);
    std::ofstream log(out + "/finetune_log.txt");
    auto curve = train_finetune(model, frozen, opt, videos, tc, rng, &log);
    save_checkpoint(out + "/finetuned.ckpt", make_checkpoint(model, &opt, &rng));
    if (!curve.empty())
        std::cout << format_record({{"steps", static_cast<double>(curve.size())},
                                    {"first_total", curve.front()},
                                    {"last_total", curve.back()}})
                  << "\n";
    std::cout << "checkpoint: " << out << "/finetuned.ckpt\n";
    return 0;
}

int cmd_eval_consistency(const Config& cfg) {
    auto scenes = load_archive(cfg.get_str("data", "data"));
    double acc_a = 0, acc_m = 0, acc_r = 0;
    int counted = 0;
    for (const auto& views : scenes) {
        ConsistencyReport rep = mv_consistency_rmse(camera_views(views), scene_preds(cfg, views));
        if (rep.pair_count == 0) continue;
        acc_a += rep.albedo_rmse;
        acc_m += rep.metallic_rmse;
        acc_r += rep.roughness_rmse;
        ++counted;
    }
    if (counted == 0) throw ContractError("eval-consistency: no scene had overlapping view pairs");
    const std::vector<std::pair<std::string, double>> rows = {{"scenes", static_cast<double>(counted)},
                                                              {"albedo_rmse", acc_a / counted},
                                                              {"metallic_rmse", acc_m / counted},
                                                              {"roughness_rmse", acc_r / counted}};
    const std::string out = cfg.get_str("out", "out");
    fs::create_directories(out);
    write_report(out + "/consistency.txt", "multi-view consistency", rows);
    std::cout << format_record(rows) << "\n";
    return 0;
}

int cmd_eval_normals(const Config& cfg) {
    auto scenes = load_archive(cfg.get_str("data", "data"));
    double mae = 0, p11 = 0, p30 = 0;
    int counted = 0;
    for (const auto& views : scenes) {
        IntrinsicSet preds = scene_preds(cfg, views);
        for (size_t i = 0; i < views.size(); ++i) {
            NormalReport rep = normal_metrics(preds.normal[i], views[i].normal_cam, views[i].mask);
            mae += rep.mae_deg;
            p11 += rep.pct_below_11_25;
            p30 += rep.pct_below_30;
            ++counted;
        }
    }
    const std::vector<std::pair<std::string, double>> rows = {{"views", static_cast<double>(counted)},
                                                              {"mae_deg", mae / counted},
                                                              {"pct_below_11.25", p11 / counted},
                                                              {"pct_below_30", p30 / counted}};
    const std::string out = cfg.get_str("out", "out");
    fs::create_directories(out);
    write_report(out + "/normals.txt", "normal angular error", rows);
    std::cout << format_record(rows) << "\n";
    return 0;
}

int cmd_eval_temporal(const Config& cfg) {
    auto scenes = load_archive(cfg.get_str("data", "data"));
    double a = 0, m = 0, r = 0, s = 0;
    int counted = 0;
    for (const auto& views : scenes) {
        std::vector<Tensor> flows, valids;
        for (size_t i = 0; i + 1 < views.size(); ++i) {
            if (!views[i].flow_to_next.defined())
                throw ContractError("eval-temporal: missing flow for frame pair " + std::to_string(i) + "->" +
                                    std::to_string(i + 1));
            flows.push_back(views[i].flow_to_next);
            valids.push_back(views[i].flow_valid);
        }
        TemporalReport rep = temporal_warp_rmse(scene_preds(cfg, views), flows, valids);
        a += rep.albedo_rmse;
        m += rep.metallic_rmse;
        r += rep.roughness_rmse;
        s += rep.shading_rmse;
        ++counted;
    }
    const std::vector<std::pair<std::string, double>> rows = {{"videos", static_cast<double>(counted)},
                                                              {"albedo_rmse", a / counted},
                                                              {"metallic_rmse", m / counted},
                                                              {"roughness_rmse", r / counted},
                                                              {"shading_rmse", s / counted}};
    const std::string out = cfg.get_str("out", "out");
    fs::create_directories(out);
    write_report(out + "/temporal.txt", "temporal warp RMSE", rows);
    std::cout << format_record(rows) << "\n";
    return 0;
}

LightRig rig_from_config(const Config& cfg) {
    LightRig rig;
    rig.ambient = get_vec3(cfg, "ambient", {0.2, 0.2, 0.2});
    for (int i = 0;; ++i) {
        const std::string key = "light." + std::to_string(i);
        if (!cfg.has(key + ".position")) break;
        PointLight l;
        l.position = get_vec3(cfg, key + ".position", {0, 0, 0});
        l.intensity = get_vec3(cfg, key + ".intensity", {1, 1, 1});
        rig.lights.push_back(l);
    }
    if (rig.lights.empty()) rig.lights.push_back({{1.5, -2.0, 1.5}, {8, 8, 8}});
    rig.validate();
    return rig;
}

int cmd_relight(const Config& cfg) {
    auto scenes = load_archive(cfg.get_str("data", "data"));
    const auto& views = scenes[0];
    IntrinsicSet preds = scene_preds(cfg, views);
    std::vector<MaterialMaps> maps;
    for (size_t i = 0; i < views.size(); ++i)
        maps.push_back({preds.albedo[i], preds.metallic[i], preds.roughness[i], preds.normal[i]});
    PointCloudPBR cloud = fuse_pointcloud(camera_views(views), maps, cfg.get_double("voxel", 0.0));
    LightRig rig = rig_from_config(cfg);
    const std::string out = cfg.get_str("out", "out");
    fs::create_directories(out);
    for (size_t i = 0; i < views.size(); ++i) {
        RelitCamera cam{views[i].intrinsics, views[i].pose, views[i].depth.dim(0), views[i].depth.dim(1)};
        Tensor img = render_relit(cloud, cam, rig, cfg.get_double("splat_radius", 1.5));
        char name[32];
        std::snprintf(name, sizeof(name), "relit_%03zu.png", i);
        write_png(out + "/" + name, img);
    }
    std::cout << "wrote " << views.size() << " relit frames to " << out << "\n";
    return 0;
}

int cmd_edit(const Config& cfg) {
    auto scenes = load_archive(cfg.get_str("data", "data"));
    const auto& views = scenes[0];
    EditRegion region;
    region.center = get_vec3(cfg, "region.center", {0, 0.1, 3});
    region.radius = cfg.get_double("region.radius", 1.0);
    const Eigen::Vector3d new_albedo = get_vec3(cfg, "edit.albedo", {0.8, 0.1, 0.1});
    std::vector<Tensor> images;
    for (const auto& v : views) images.push_back(v.rgb);
    bool empty = false;
    auto edited = edit_material(camera_views(views), images, scene_preds(cfg, views), region, new_albedo, &empty);
    const std::string out = cfg.get_str("out", "out");
    fs::create_directories(out);
    for (size_t i = 0; i < edited.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "edit_%03zu.png", i);
        write_png(out + "/" + name, edited[i]);
    }
    std::cout << "wrote " << edited.size() << " edited frames to " << out
              << (empty ? " (region was empty; output unedited)" : "") << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-view inverse rendering pipeline"};
    app.require_subcommand(1);

    CommonOpts o;
    std::string difficulty, out_flag;
    int scenes_flag = -1, views_flag = -1, res_flag = -1;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config_path, "key=value config file");
        sub->add_option("--out", out_flag, "output directory");
        sub->add_option("--seed", o.seed, "RNG seed")->each([&](const std::string&) { o.seed_set = true; });
        sub->add_flag("--deterministic", o.deterministic, "single-threaded, bit-reproducible mode");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "render a procedural scene archive");
    add_common(gen);
    gen->add_option("--difficulty", difficulty, "minimal | easy | medium");
    gen->add_option("--scenes", scenes_flag, "scene count");
    gen->add_option("--views", views_flag, "views per scene");
    gen->add_option("--res", res_flag, "image size");

    CLI::App* train = app.add_subcommand("train", "pretrain on a scene archive");
    CLI::App* finetune = app.add_subcommand("finetune", "consistency-finetune on videos");
    for (CLI::App* sub : {train, finetune}) {
        add_common(sub);
        sub->add_option("--data", o.data, "scene archive directory");
        sub->add_option("--steps", o.steps, "optimization steps");
        sub->add_option("--lr", o.lr, "learning rate");
        sub->add_option("--views", o.views_range, "views per batch, LO..HI");
        sub->add_option("--checkpoint", o.checkpoint, "pretrained checkpoint (finetune)");
    }

    CLI::App* evc = app.add_subcommand("eval-consistency", "multi-view consistency RMSE");
    CLI::App* evn = app.add_subcommand("eval-normals", "normal angular metrics");
    CLI::App* evt = app.add_subcommand("eval-temporal", "temporal warp RMSE");
    CLI::App* relight = app.add_subcommand("relight", "render the fused cloud under a new rig");
    CLI::App* edit = app.add_subcommand("edit", "recolor a world-space region");
    for (CLI::App* sub : {evc, evn, evt, relight, edit}) {
        add_common(sub);
        sub->add_option("--data", o.data, "scene archive directory");
        sub->add_option("--checkpoint", o.checkpoint, "model checkpoint (GT maps when absent)");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        Config cfg = load_config(o);
        if (!out_flag.empty()) cfg.set("out", out_flag);
        if (gen->parsed()) {
            if (!difficulty.empty()) cfg.set("difficulty", difficulty);
            if (scenes_flag >= 0) cfg.set("scenes", std::to_string(scenes_flag));
            if (views_flag >= 0) cfg.set("views", std::to_string(views_flag));
            if (res_flag >= 0) cfg.set("res", std::to_string(res_flag));
            return cmd_gen_data(cfg);
        }
        if (train->parsed()) return cmd_train(cfg);
        if (finetune->parsed()) return cmd_finetune(cfg);
        if (evc->parsed()) return cmd_eval_consistency(cfg);
        if (evn->parsed()) return cmd_eval_normals(cfg);
        if (evt->parsed()) return cmd_eval_temporal(cfg);
        if (relight->parsed()) return cmd_relight(cfg);
        if (edit->parsed()) return cmd_edit(cfg);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
