#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mvir/tensor.hpp"

namespace mvir {

// World convention: right-handed, y points down (ground planes sit at
// positive y). Cameras look along +z with x right, y down; pinhole
// projection u = fx*X/Z + cx with pixel centers at integer + 0.5.

struct Material {
    Eigen::Vector3d albedo{0.5, 0.5, 0.5};
    bool checker = false;  // procedural two-tone checker in world space
    Eigen::Vector3d albedo2{0.1, 0.1, 0.1};
    double checker_scale = 1.0;
    double metallic = 0.0;
    double roughness = 0.5;   // clamped >= 0.05
    bool lambertian = false;  // suppresses the specular lobe entirely

    Eigen::Vector3d albedo_at(const Eigen::Vector3d& p) const;
};

struct Sphere {
    Eigen::Vector3d center{0, 0, 0};
    double radius = 1.0;
    int material = 0;
};

struct GroundPlane {
    bool enabled = false;
    double height = 1.0;  // plane y = height; outward normal (0,-1,0)
    int material = 0;
};

struct PointLight {
    Eigen::Vector3d position{0, 0, 0};
    Eigen::Vector3d intensity{1, 1, 1};  // radiant intensity, linear RGB
};

struct Pinhole {
    double fx = 0, fy = 0, cx = 0, cy = 0;
};

struct Pose {
    Eigen::Matrix3d rot = Eigen::Matrix3d::Identity();  // camera-to-world
    Eigen::Vector3d trans{0, 0, 0};
};

/// Camera-to-world pose looking from `eye` toward `target` (world-down as the
/// image y direction).
Pose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target);

struct SceneSpec {
    std::vector<Sphere> spheres;
    GroundPlane plane;
    std::vector<Material> materials;
    std::vector<PointLight> lights;
    Eigen::Vector3d ambient{0, 0, 0};
    std::vector<Pose> path;
    Pinhole intrinsics;
};

/// One rendered view with all ground-truth channels. Maps are plain tensors
/// (no tape history); misses carry depth=+inf, rgb=0.5 gray, zero albedo and
/// shading, and are excluded by `mask`.
struct ViewBundle {
    Tensor rgb;         // [3,H,W]
    Tensor albedo;      // [3,H,W]
    Tensor metallic;    // [1,H,W]
    Tensor roughness;   // [1,H,W]
    Tensor normal_cam;  // [3,H,W], unit, front-facing n_z < 0
    Tensor shading;     // [3,H,W] diffuse shading D
    Tensor specular;    // [3,H,W] specular component (rgb = clamp(albedo*D + specular))
    Tensor depth;       // [H,W] camera z-depth, +inf for sky
    Tensor mask;        // [H,W] hit pixels
    Pinhole intrinsics;
    Pose pose;
    Tensor flow_to_next;  // [2,H,W] pixel flow into the next view, optional
    Tensor flow_valid;    // [H,W]
};

enum class Difficulty { minimal, easy, medium };
Difficulty difficulty_from_string(const std::string& s);
std::string to_string(Difficulty d);

struct SceneGenConfig {
    Difficulty difficulty = Difficulty::easy;
    int num_views = 8;
    int height = 64;
    int width = 64;
};

/// Deterministic procedural scene for a seed. Light intensities are globally
/// rescaled (by rendering the configured path) so shading and radiance stay
/// in [0,1].
SceneSpec gen_scene(uint64_t seed, const SceneGenConfig& cfg);

ViewBundle render_view(const SceneSpec& scene, int pose_index, int h, int w);

/// Camera z-depth only (used for occlusion checks).
Tensor render_depth(const SceneSpec& scene, const Pose& pose, int h, int w);

/// Pixel flow from view `pose_a` into view `pose_b`: value at pixel u of view
/// a is (projection of the back-projected point into b) - u. Validity needs
/// an in-bounds projection and depth agreement within `occlusion_tol`.
void analytic_flow(const SceneSpec& scene, int pose_a, int pose_b, const Tensor& depth_a, Tensor* flow_out,
                   Tensor* valid_out, double occlusion_tol = 0.01);

/// Renders every pose of the path, filling flow_to_next for consecutive pairs.
std::vector<ViewBundle> render_sequence(const SceneSpec& scene, int h, int w);

}  // namespace mvir
