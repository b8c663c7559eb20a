#pragma once

#include <Eigen/Dense>

#include <utility>
#include <vector>

#include "mvir/scene.hpp"
#include "mvir/tensor.hpp"

namespace mvir {

/// Pinhole camera with a depth map, the unit the projective operations work
/// on. Same conventions as the renderer: camera-to-world pose, +z forward,
/// pixel centers at integer + 0.5.
struct CameraView {
    Pinhole intrinsics;
    Pose pose;
    Tensor depth;  // [H,W] camera z-depth, +inf where nothing was hit

    int height() const { return depth.dim(0); }
    int width() const { return depth.dim(1); }
    /// Rotation orthonormality within 1e-9 and positive focal lengths.
    void validate() const;
};

/// World-space positions per pixel as [3,H,W]; `valid_out` (optional) marks
/// finite-depth pixels.
Tensor backproject(const CameraView& view, Tensor* valid_out = nullptr);

struct ReprojectResult {
    Tensor map;      // [C,H,W] in the destination frame, 0 outside overlap
    Tensor overlap;  // [H,W] in {0,1}
};

/// Forward-splats `src_map` through 3D into `dst` with z-buffering (nearest
/// pixel, deterministic scan order). Overlap requires an in-bounds projection
/// and relative depth agreement within `occlusion_tol`.
ReprojectResult reproject_map(const CameraView& src, const Tensor& src_map, const CameraView& dst,
                              double occlusion_tol = 0.01);

/// Differentiable backward warp of the next frame's map to the current frame;
/// thin wrapper over the tensor primitive so finetuning and evaluation share
/// one convention with analytic_flow.
Tensor warp_backward(const Tensor& map_next, const Tensor& flow, const Tensor& validity);

struct PointCloudPBR {
    std::vector<Eigen::Vector3d> positions;
    std::vector<Eigen::Vector3d> albedo;
    std::vector<double> metallic;
    std::vector<double> roughness;
    std::vector<Eigen::Vector3d> normal_world;  // unit
    std::vector<std::pair<int, long long>> source;  // (view, pixel) provenance

    size_t size() const { return positions.size(); }
};

/// Per-view material maps consumed by fusion (albedo [3,H,W], metallic and
/// roughness [1,H,W], normal_cam [3,H,W] unit).
struct MaterialMaps {
    Tensor albedo;
    Tensor metallic;
    Tensor roughness;
    Tensor normal_cam;
};

/// Back-projects every finite-depth pixel of every view, carrying materials
/// and world-space normals. voxel > 0 deduplicates on a voxel grid keeping
/// the sample nearest to its camera.
PointCloudPBR fuse_pointcloud(const std::vector<CameraView>& views, const std::vector<MaterialMaps>& maps,
                              double voxel = 0.0);

}  // namespace mvir
