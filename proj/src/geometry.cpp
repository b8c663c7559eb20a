#include "mvir/geometry.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <tuple>

namespace mvir {

void CameraView::validate() const {
    const Eigen::Matrix3d gram = pose.rot.transpose() * pose.rot;
    if ((gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9)
        throw ContractError("CameraView: rotation is not orthonormal");
    if (intrinsics.fx <= 0.0 || intrinsics.fy <= 0.0) throw ContractError("CameraView: focal lengths must be positive");
    if (!depth.defined() || depth.ndim() != 2) throw ShapeError("CameraView: depth must be [H,W]");
}

Tensor backproject(const CameraView& view, Tensor* valid_out) {
    view.validate();
    const int h = view.height(), w = view.width();
    const Pinhole& K = view.intrinsics;
    const long long hw = static_cast<long long>(h) * w;
    Tensor pts = Tensor::zeros({3, h, w});
    Tensor valid = Tensor::zeros({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const long long p = static_cast<long long>(y) * w + x;
            const double z = view.depth.at(p);
            if (!std::isfinite(z)) continue;
            const Eigen::Vector3d cam((x + 0.5 - K.cx) / K.fx * z, (y + 0.5 - K.cy) / K.fy * z, z);
            const Eigen::Vector3d world = view.pose.rot * cam + view.pose.trans;
            pts.at(p) = world.x();
            pts.at(hw + p) = world.y();
            pts.at(2 * hw + p) = world.z();
            valid.at(p) = 1.0;
        }
    if (valid_out) *valid_out = std::move(valid);
    return pts;
}

ReprojectResult reproject_map(const CameraView& src, const Tensor& src_map, const CameraView& dst,
                              double occlusion_tol) {
    src.validate();
    dst.validate();
    if (src_map.ndim() != 3 || src_map.dim(1) != src.height() || src_map.dim(2) != src.width())
        throw ShapeError("reproject_map: map extents must match the source view");
    const int c = src_map.dim(0);
    const int sh = src.height(), sw = src.width();
    const int dh = dst.height(), dw = dst.width();
    const long long shw = static_cast<long long>(sh) * sw;
    const long long dhw = static_cast<long long>(dh) * dw;
    ReprojectResult out;
    out.map = Tensor::zeros({c, dh, dw});
    out.overlap = Tensor::zeros({dh, dw});
    std::vector<double> zbuf(static_cast<size_t>(dhw), std::numeric_limits<double>::infinity());
    const Pinhole& Ks = src.intrinsics;
    const Pinhole& Kd = dst.intrinsics;
    for (int y = 0; y < sh; ++y)
        for (int x = 0; x < sw; ++x) {
            const long long p = static_cast<long long>(y) * sw + x;
            const double z = src.depth.at(p);
            if (!std::isfinite(z)) continue;
            const Eigen::Vector3d cam((x + 0.5 - Ks.cx) / Ks.fx * z, (y + 0.5 - Ks.cy) / Ks.fy * z, z);
            const Eigen::Vector3d world = src.pose.rot * cam + src.pose.trans;
            const Eigen::Vector3d cd = dst.pose.rot.transpose() * (world - dst.pose.trans);
            if (cd.z() <= 0.0) continue;
            const double u = Kd.fx * cd.x() / cd.z() + Kd.cx;  // center coordinates
            const double v = Kd.fy * cd.y() / cd.z() + Kd.cy;
            const int ui = static_cast<int>(std::floor(u));
            const int vi = static_cast<int>(std::floor(v));
            if (ui < 0 || ui >= dw || vi < 0 || vi >= dh) continue;
            const long long q = static_cast<long long>(vi) * dw + ui;
            if (cd.z() >= zbuf[static_cast<size_t>(q)]) continue;
            const double dz = dst.depth.at(q);
            if (!std::isfinite(dz) || std::fabs(cd.z() - dz) / dz >= occlusion_tol) continue;
            zbuf[static_cast<size_t>(q)] = cd.z();
            out.overlap.at(q) = 1.0;
            for (int ci = 0; ci < c; ++ci) out.map.at(ci * dhw + q) = src_map.at(ci * shw + p);
        }
    return out;
}

Tensor warp_backward(const Tensor& map_next, const Tensor& flow, const Tensor& validity) {
    return warp_bilinear(map_next, flow, validity);
}

PointCloudPBR fuse_pointcloud(const std::vector<CameraView>& views, const std::vector<MaterialMaps>& maps,
                              double voxel) {
    if (views.empty() || views.size() != maps.size())
        throw ContractError("fuse_pointcloud: need matching non-empty view and map lists");
    PointCloudPBR cloud;
    std::vector<double> cam_depth;  // per kept point, for nearest-to-camera dedup
    // voxel key -> index into cloud
    std::map<std::tuple<long long, long long, long long>, size_t> cells;
    for (size_t vi = 0; vi < views.size(); ++vi) {
        const CameraView& view = views[vi];
        view.validate();
        const int h = view.height(), w = view.width();
        const long long hw = static_cast<long long>(h) * w;
        const MaterialMaps& m = maps[vi];
        if (m.albedo.dim(1) != h || m.albedo.dim(2) != w)
            throw ShapeError("fuse_pointcloud: map extents must match the view depth");
        Tensor pts = backproject(view);
        for (long long p = 0; p < hw; ++p) {
            const double z = view.depth.at(p);
            if (!std::isfinite(z)) continue;
            const Eigen::Vector3d pos(pts.at(p), pts.at(hw + p), pts.at(2 * hw + p));
            const Eigen::Vector3d n_cam(m.normal_cam.at(p), m.normal_cam.at(hw + p), m.normal_cam.at(2 * hw + p));
            const Eigen::Vector3d n_world = view.pose.rot * n_cam;
            const Eigen::Vector3d alb(m.albedo.at(p), m.albedo.at(hw + p), m.albedo.at(2 * hw + p));
            size_t slot = cloud.size();
            if (voxel > 0.0) {
                const auto key = std::make_tuple(static_cast<long long>(std::floor(pos.x() / voxel)),
                                                 static_cast<long long>(std::floor(pos.y() / voxel)),
                                                 static_cast<long long>(std::floor(pos.z() / voxel)));
                auto [it, inserted] = cells.try_emplace(key, slot);
                if (!inserted) {
                    if (z >= cam_depth[it->second]) continue;  // keep the nearest-to-camera sample
                    slot = it->second;
                }
            }
            if (slot == cloud.size()) {
                cloud.positions.push_back(pos);
                cloud.albedo.push_back(alb);
                cloud.metallic.push_back(m.metallic.at(p));
                cloud.roughness.push_back(m.roughness.at(p));
                cloud.normal_world.push_back(n_world);
                cloud.source.emplace_back(static_cast<int>(vi), p);
                cam_depth.push_back(z);
            } else {
                cloud.positions[slot] = pos;
                cloud.albedo[slot] = alb;
                cloud.metallic[slot] = m.metallic.at(p);
                cloud.roughness[slot] = m.roughness.at(p);
                cloud.normal_world[slot] = n_world;
                cloud.source[slot] = {static_cast<int>(vi), p};
                cam_depth[slot] = z;
            }
        }
    }
    if (cloud.size() == 0) throw ContractError("fuse_pointcloud: no valid pixels in any view");
    return cloud;
}

}  // namespace mvir
