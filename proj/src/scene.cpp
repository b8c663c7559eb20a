#include "mvir/scene.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "mvir/brdf.hpp"

namespace mvir {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kRayEps = 1e-6;

struct Hit {
    bool ok = false;
    double t = kInf;
    Eigen::Vector3d point{0, 0, 0};
    Eigen::Vector3d normal{0, 0, 0};
    int material = 0;
};

Hit intersect(const SceneSpec& scene, const Eigen::Vector3d& o, const Eigen::Vector3d& d, double tmin, double tmax) {
    Hit best;
    best.t = tmax;
    for (const auto& s : scene.spheres) {
        const Eigen::Vector3d oc = o - s.center;
        const double a = d.dot(d);
        const double b = 2.0 * d.dot(oc);
        const double c = oc.dot(oc) - s.radius * s.radius;
        const double disc = b * b - 4.0 * a * c;
        if (disc < 0.0) continue;
        const double sq = std::sqrt(disc);
        for (double t : {(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)}) {
            if (t > tmin && t < best.t) {
                best.ok = true;
                best.t = t;
                best.point = o + t * d;
                best.normal = (best.point - s.center).normalized();
                best.material = s.material;
                break;
            }
        }
    }
    if (scene.plane.enabled && std::fabs(d.y()) > 1e-12) {
        const double t = (scene.plane.height - o.y()) / d.y();
        if (t > tmin && t < best.t) {
            best.ok = true;
            best.t = t;
            best.point = o + t * d;
            best.normal = Eigen::Vector3d(0, -1, 0);  // up, toward negative y
            best.material = scene.plane.material;
        }
    }
    if (best.ok && best.normal.dot(d) > 0.0) best.normal = -best.normal;
    return best;
}

bool occluded(const SceneSpec& scene, const Eigen::Vector3d& from, const Eigen::Vector3d& to) {
    const Eigen::Vector3d d = to - from;
    const double dist = d.norm();
    Hit h = intersect(scene, from, d / dist, 1e-4, dist * (1.0 - 1e-6));
    return h.ok;
}

struct ShadeResult {
    Eigen::Vector3d shading{0, 0, 0};   // diffuse shading D
    Eigen::Vector3d specular{0, 0, 0};
};

ShadeResult shade(const SceneSpec& scene, const Hit& hit, const Eigen::Vector3d& view_pos) {
    ShadeResult out;
    const Material& mat = scene.materials[static_cast<size_t>(hit.material)];
    const Eigen::Vector3d albedo = mat.albedo_at(hit.point);
    const Eigen::Vector3d v = (view_pos - hit.point).normalized();
    for (const auto& light : scene.lights) {
        const Eigen::Vector3d to_light = light.position - hit.point;
        const double d2 = to_light.squaredNorm();
        const Eigen::Vector3d l = to_light / std::sqrt(d2);
        const double cos_theta = hit.normal.dot(l);
        if (cos_theta <= 0.0) continue;
        if (occluded(scene, hit.point + hit.normal * 1e-6, light.position)) continue;
        out.shading += light.intensity * (cos_theta / (kPi * d2));
        if (!mat.lambertian) {
            const Eigen::Vector3d fs = cook_torrance_specular(hit.normal, v, l, albedo, mat.metallic, mat.roughness);
            out.specular += (light.intensity / d2).cwiseProduct(fs) * cos_theta;
        }
    }
    out.shading += scene.ambient / kPi;
    return out;
}

// Bilinear sample of an [H,W] map at index coordinates; false if any tap is
// out of bounds or non-finite.
bool sample_depth(const Tensor& depth, double fx, double fy, double* out) {
    const int h = depth.dim(0), w = depth.dim(1);
    if (fx < 0.0 || fx > w - 1.0 || fy < 0.0 || fy > h - 1.0) return false;
    const int x0 = std::min(static_cast<int>(std::floor(fx)), w - 2);
    const int y0 = std::min(static_cast<int>(std::floor(fy)), h - 2);
    const double wx = fx - x0, wy = fy - y0;
    const double v00 = depth.at(y0 * w + x0), v01 = depth.at(y0 * w + x0 + 1);
    const double v10 = depth.at((y0 + 1) * w + x0), v11 = depth.at((y0 + 1) * w + x0 + 1);
    if (!std::isfinite(v00) || !std::isfinite(v01) || !std::isfinite(v10) || !std::isfinite(v11)) return false;
    *out = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
    return true;
}

void calibrate_lights(SceneSpec& scene, int h, int w) {
    double peak = 0.0;
    for (size_t i = 0; i < scene.path.size(); ++i) {
        ViewBundle vb = render_view(scene, static_cast<int>(i), h, w);
        const long long hw = static_cast<long long>(h) * w;
        for (long long p = 0; p < hw; ++p) {
            if (vb.mask.at(p) < 0.5) continue;
            for (int c = 0; c < 3; ++c) {
                const double d = vb.shading.at(c * hw + p);
                const double radiance = vb.albedo.at(c * hw + p) * d + vb.specular.at(c * hw + p);
                peak = std::max({peak, d, radiance});
            }
        }
    }
    if (peak <= 0.0) return;
    const double k = 0.98 / peak;
    for (auto& l : scene.lights) l.intensity *= k;
    scene.ambient *= k;
}

}  // namespace

Eigen::Vector3d Material::albedo_at(const Eigen::Vector3d& p) const {
    if (!checker) return albedo;
    const long long ix = static_cast<long long>(std::floor(p.x() / checker_scale));
    const long long iz = static_cast<long long>(std::floor(p.z() / checker_scale));
    return ((ix + iz) % 2 + 2) % 2 == 0 ? albedo : albedo2;
}

Pose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target) {
    Pose pose;
    const Eigen::Vector3d fwd = (target - eye).normalized();
    Eigen::Vector3d right = Eigen::Vector3d(0, 1, 0).cross(fwd);  // world-down x forward
    if (right.norm() < 1e-9) right = Eigen::Vector3d(1, 0, 0);
    right.normalize();
    const Eigen::Vector3d down = fwd.cross(right);
    pose.rot.col(0) = right;
    pose.rot.col(1) = down;
    pose.rot.col(2) = fwd;
    pose.trans = eye;
    return pose;
}

Difficulty difficulty_from_string(const std::string& s) {
    if (s == "minimal") return Difficulty::minimal;
    if (s == "easy") return Difficulty::easy;
    if (s == "medium") return Difficulty::medium;
    throw ConfigError("unknown difficulty '" + s + "' (expected minimal|easy|medium)");
}

std::string to_string(Difficulty d) {
    switch (d) {
        case Difficulty::minimal: return "minimal";
        case Difficulty::easy: return "easy";
        default: return "medium";
    }
}

ViewBundle render_view(const SceneSpec& scene, int pose_index, int h, int w) {
    if (pose_index < 0 || pose_index >= static_cast<int>(scene.path.size()))
        throw ContractError("render_view: pose index " + std::to_string(pose_index) + " out of range");
    const Pose& pose = scene.path[static_cast<size_t>(pose_index)];
    const Pinhole& K = scene.intrinsics;
    ViewBundle vb;
    vb.intrinsics = K;
    vb.pose = pose;
    vb.rgb = Tensor::zeros({3, h, w});
    vb.albedo = Tensor::zeros({3, h, w});
    vb.metallic = Tensor::zeros({1, h, w});
    vb.roughness = Tensor::zeros({1, h, w});
    vb.normal_cam = Tensor::zeros({3, h, w});
    vb.shading = Tensor::zeros({3, h, w});
    vb.specular = Tensor::zeros({3, h, w});
    vb.depth = Tensor::full({h, w}, kInf);
    vb.mask = Tensor::zeros({h, w});
    const long long hw = static_cast<long long>(h) * w;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const long long p = static_cast<long long>(y) * w + x;
            // Camera-space direction with z = 1, so the ray parameter is z-depth.
            const Eigen::Vector3d dir_cam((x + 0.5 - K.cx) / K.fx, (y + 0.5 - K.cy) / K.fy, 1.0);
            const Eigen::Vector3d d = pose.rot * dir_cam;
            Hit hit = intersect(scene, pose.trans, d, kRayEps, kInf);
            if (!hit.ok) {
                for (int c = 0; c < 3; ++c) vb.rgb.at(c * hw + p) = 0.5;  // background gray
                vb.normal_cam.at(2 * hw + p) = -1.0;                      // unit placeholder, masked out
                continue;
            }
            const Material& mat = scene.materials[static_cast<size_t>(hit.material)];
            const Eigen::Vector3d albedo = mat.albedo_at(hit.point);
            const ShadeResult sh = shade(scene, hit, pose.trans);
            const Eigen::Vector3d n_cam = pose.rot.transpose() * hit.normal;
            vb.depth.at(p) = hit.t;
            vb.mask.at(p) = 1.0;
            vb.metallic.at(p) = mat.metallic;
            vb.roughness.at(p) = mat.roughness;
            for (int c = 0; c < 3; ++c) {
                vb.albedo.at(c * hw + p) = albedo[c];
                vb.shading.at(c * hw + p) = sh.shading[c];
                vb.specular.at(c * hw + p) = sh.specular[c];
                vb.rgb.at(c * hw + p) = std::clamp(albedo[c] * sh.shading[c] + sh.specular[c], 0.0, 1.0);
                vb.normal_cam.at(c * hw + p) = n_cam[c];
            }
        }
    }
    return vb;
}

Tensor render_depth(const SceneSpec& scene, const Pose& pose, int h, int w) {
    const Pinhole& K = scene.intrinsics;
    Tensor depth = Tensor::full({h, w}, kInf);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const Eigen::Vector3d dir_cam((x + 0.5 - K.cx) / K.fx, (y + 0.5 - K.cy) / K.fy, 1.0);
            Hit hit = intersect(scene, pose.trans, pose.rot * dir_cam, kRayEps, kInf);
            if (hit.ok) depth.at(static_cast<long long>(y) * w + x) = hit.t;
        }
    return depth;
}

void analytic_flow(const SceneSpec& scene, int pose_a, int pose_b, const Tensor& depth_a, Tensor* flow_out,
                   Tensor* valid_out, double occlusion_tol) {
    const int h = depth_a.dim(0), w = depth_a.dim(1);
    const Pose& pa = scene.path[static_cast<size_t>(pose_a)];
    const Pose& pb = scene.path[static_cast<size_t>(pose_b)];
    const Pinhole& K = scene.intrinsics;
    const Tensor depth_b = render_depth(scene, pb, h, w);
    Tensor flow = Tensor::zeros({2, h, w});
    Tensor valid = Tensor::zeros({h, w});
    const long long hw = static_cast<long long>(h) * w;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const long long p = static_cast<long long>(y) * w + x;
            const double z = depth_a.at(p);
            if (!std::isfinite(z)) continue;
            const Eigen::Vector3d dir_cam((x + 0.5 - K.cx) / K.fx, (y + 0.5 - K.cy) / K.fy, 1.0);
            const Eigen::Vector3d world = pa.rot * (z * dir_cam) + pa.trans;
            const Eigen::Vector3d cam_b = pb.rot.transpose() * (world - pb.trans);
            if (cam_b.z() <= 0.0) continue;
            const double u = K.fx * cam_b.x() / cam_b.z() + K.cx;  // center coords
            const double v = K.fy * cam_b.y() / cam_b.z() + K.cy;
            flow.at(p) = u - (x + 0.5);
            flow.at(hw + p) = v - (y + 0.5);
            double db = 0.0;
            if (!sample_depth(depth_b, u - 0.5, v - 0.5, &db)) continue;
            if (std::fabs(cam_b.z() - db) / db >= occlusion_tol) continue;
            valid.at(p) = 1.0;
        }
    }
    if (flow_out) *flow_out = std::move(flow);
    if (valid_out) *valid_out = std::move(valid);
}

std::vector<ViewBundle> render_sequence(const SceneSpec& scene, int h, int w) {
    std::vector<ViewBundle> views;
    for (size_t i = 0; i < scene.path.size(); ++i) views.push_back(render_view(scene, static_cast<int>(i), h, w));
    for (size_t i = 0; i + 1 < views.size(); ++i)
        analytic_flow(scene, static_cast<int>(i), static_cast<int>(i + 1), views[i].depth, &views[i].flow_to_next,
                      &views[i].flow_valid);
    return views;
}

SceneSpec gen_scene(uint64_t seed, const SceneGenConfig& cfg) {
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    auto urange = [&](double lo, double hi) { return lo + (hi - lo) * uni(rng); };

    SceneSpec scene;
    const double f = 1.2 * std::max(cfg.width, cfg.height);
    scene.intrinsics = {f, f, cfg.width / 2.0, cfg.height / 2.0};

    const Eigen::Vector3d target(0.0, 0.1, 3.0);
    if (cfg.difficulty == Difficulty::minimal) {
        Material mat;
        mat.albedo = Eigen::Vector3d(urange(0.25, 0.85), urange(0.25, 0.85), urange(0.25, 0.85));
        mat.lambertian = true;
        mat.roughness = 1.0;
        scene.materials.push_back(mat);
        scene.spheres.push_back({target, 0.9, 0});
        scene.lights.push_back({target + Eigen::Vector3d(1.8, -2.2, -1.5), Eigen::Vector3d(8, 8, 8)});
        scene.ambient = Eigen::Vector3d(0.35, 0.35, 0.35);
        const Pose pose = look_at(Eigen::Vector3d(0, 0, 0), target);
        scene.path.assign(static_cast<size_t>(cfg.num_views), pose);
    } else {
        const bool medium = cfg.difficulty == Difficulty::medium;
        const int n_spheres = medium ? 2 + static_cast<int>(rng() % 3) : 1 + static_cast<int>(rng() % 2);
        // resample colors that land too close to an earlier material: near-twin
        // albedos make the reflectance decomposition ill-conditioned at toy scale
        auto pick_albedo = [&](double lo, double hi) {
            Eigen::Vector3d a;
            for (int attempt = 0; attempt < 64; ++attempt) {
                a = Eigen::Vector3d(urange(lo, hi), urange(lo, hi), urange(lo, hi));
                bool separated = true;
                for (const auto& m : scene.materials)
                    if ((a - m.albedo).norm() < 0.5) separated = false;
                if (separated) break;
            }
            return a;
        };
        for (int i = 0; i < n_spheres; ++i) {
            Material mat;
            mat.albedo = pick_albedo(0.15, 0.9);
            mat.roughness = std::max(kMinRoughness, urange(medium ? 0.1 : 0.3, 0.9));
            mat.metallic = medium && uni(rng) < 0.4 ? urange(0.3, 1.0) : 0.0;
            mat.lambertian = !medium;
            const double r = medium ? urange(0.45, 0.8) : urange(0.65, 0.95);
            // keep spheres disjoint: albedo boundaries must coincide with
            // depth boundaries for the reprojection oracles
            Eigen::Vector3d center;
            bool clear = false;
            for (int attempt = 0; attempt < 64 && !clear; ++attempt) {
                center = medium ? target + Eigen::Vector3d(urange(-1.4, 1.4), urange(-0.4, 0.4), urange(-0.9, 0.9))
                                : target + Eigen::Vector3d(urange(-0.8, 0.8), urange(-0.3, 0.3), urange(-0.6, 0.6));
                clear = true;
                for (const auto& other : scene.spheres)
                    if ((center - other.center).norm() < r + other.radius + 0.05) clear = false;
            }
            if (!clear) continue;  // drop the sphere rather than overlap
            scene.materials.push_back(mat);
            scene.spheres.push_back({center, r, static_cast<int>(scene.materials.size()) - 1});
        }
        Material ground;
        ground.albedo = pick_albedo(0.3, 0.8);
        ground.roughness = 0.8;
        ground.lambertian = !medium;
        if (medium) {
            ground.checker = true;
            ground.albedo2 = Eigen::Vector3d(urange(0.05, 0.3), urange(0.05, 0.3), urange(0.05, 0.3));
            ground.checker_scale = urange(0.5, 1.0);
        }
        scene.materials.push_back(ground);
        scene.plane = {true, 1.6, static_cast<int>(scene.materials.size()) - 1};

        const int n_lights = medium ? 2 : 1;
        for (int i = 0; i < n_lights; ++i) {
            const Eigen::Vector3d lp = target + Eigen::Vector3d(urange(-2.5, 2.5), urange(-3.0, -1.5), urange(-2.0, 0.5));
            scene.lights.push_back({lp, Eigen::Vector3d(urange(5, 12), urange(5, 12), urange(5, 12))});
        }
        scene.ambient = Eigen::Vector3d::Constant(urange(0.1, 0.3));

        // Orbit with >= 50% consecutive overlap: small angular steps around the
        // target, optional gentle dolly for medium scenes.
        const double span = medium ? 0.6 : 0.4;
        const double theta0 = urange(-0.2, 0.2);
        const double radius0 = medium ? urange(2.6, 3.2) : urange(2.3, 2.8);
        const double elev = urange(-0.7, -0.2);
        for (int i = 0; i < cfg.num_views; ++i) {
            const double s = cfg.num_views > 1 ? static_cast<double>(i) / (cfg.num_views - 1) : 0.5;
            const double theta = theta0 + span * (s - 0.5);
            const double radius = radius0 * (medium ? 1.0 - 0.08 * s : 1.0);
            const Eigen::Vector3d eye = target + Eigen::Vector3d(radius * std::sin(theta), elev, -radius * std::cos(theta));
            scene.path.push_back(look_at(eye, target));
        }
    }
    calibrate_lights(scene, cfg.height, cfg.width);
    return scene;
}

}  // namespace mvir
