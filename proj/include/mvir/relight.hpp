#pragma once

#include <Eigen/Dense>

#include <vector>

#include "mvir/geometry.hpp"
#include "mvir/model.hpp"
#include "mvir/scene.hpp"
#include "mvir/tensor.hpp"

namespace mvir {

struct LightRig {
    std::vector<PointLight> lights;
    Eigen::Vector3d ambient{0, 0, 0};

    /// Nonnegative intensities.
    void validate() const;
};

/// PBR shading of one surface point: Lambertian diffuse
/// (1-metallic)*albedo/pi plus Cook-Torrance GGX specular per light, plus
/// ambient*albedo/pi. No shadow rays (points carry no connectivity).
/// n and view_dir are unit vectors; view_dir points from the surface toward
/// the camera. Returns linear (unclamped) RGB.
Eigen::Vector3d shade_point(const Eigen::Vector3d& position, const Eigen::Vector3d& albedo, double metallic,
                            double roughness, const Eigen::Vector3d& n, const Eigen::Vector3d& view_dir,
                            const LightRig& rig);

/// Camera for relighting: pose + intrinsics + target extents (no depth, the
/// cloud provides the geometry).
struct RelitCamera {
    Pinhole intrinsics;
    Pose pose;
    int height = 0;
    int width = 0;
};

/// Projects the cloud, z-buffer splats with the given pixel radius, and
/// shades every visible point. Background pixels take `background`. Returns
/// linear radiance [3,H,W] without clamping (callers clamp for display);
/// `coverage_out` (optional) marks pixels hit by at least one splat.
Tensor render_relit(const PointCloudPBR& cloud, const RelitCamera& cam, const LightRig& rig,
                    double splat_radius = 1.5, const Eigen::Vector3d& background = {0.5, 0.5, 0.5},
                    Tensor* coverage_out = nullptr);

/// World-space spherical edit region.
struct EditRegion {
    Eigen::Vector3d center{0, 0, 0};
    double radius = 0;

    bool contains(const Eigen::Vector3d& p) const { return (p - center).norm() <= radius; }
};

/// Per-view material edit: pixels whose back-projected point falls in the
/// region are replaced with new_albedo * predicted diffuse shading; all other
/// pixels are copied bit-exactly from the originals. If the region projects
/// to no pixel in any view, sets `empty_warning` and returns the originals.
std::vector<Tensor> edit_material(const std::vector<CameraView>& views, const std::vector<Tensor>& images,
                                  const IntrinsicSet& preds, const EditRegion& region,
                                  const Eigen::Vector3d& new_albedo, bool* empty_warning = nullptr);

}  // namespace mvir
