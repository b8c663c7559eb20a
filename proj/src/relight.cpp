#include "mvir/relight.hpp"

#include <cmath>
#include <iostream>
#include <limits>

#include "mvir/brdf.hpp"

namespace mvir {

void LightRig::validate() const {
    for (const auto& l : lights)
        if (l.intensity.minCoeff() < 0.0) throw ContractError("LightRig: negative light intensity");
    if (ambient.minCoeff() < 0.0) throw ContractError("LightRig: negative ambient");
}

Eigen::Vector3d shade_point(const Eigen::Vector3d& position, const Eigen::Vector3d& albedo, double metallic,
                            double roughness, const Eigen::Vector3d& n, const Eigen::Vector3d& view_dir,
                            const LightRig& rig) {
    const double rough = std::max(roughness, kMinRoughness);
    const Eigen::Vector3d diffuse_refl = albedo * ((1.0 - metallic) / kPi);
    Eigen::Vector3d out = albedo.cwiseProduct(rig.ambient) / kPi;
    for (const auto& light : rig.lights) {
        const Eigen::Vector3d to_light = light.position - position;
        const double d2 = to_light.squaredNorm();
        if (d2 <= 0.0) continue;
        const Eigen::Vector3d l = to_light / std::sqrt(d2);
        const double cos_l = n.dot(l);
        if (cos_l <= 0.0) continue;
        const Eigen::Vector3d irradiance = light.intensity * (cos_l / d2);
        const Eigen::Vector3d spec = cook_torrance_specular(n, view_dir, l, albedo, metallic, rough);
        out += (diffuse_refl + spec).cwiseProduct(irradiance);
    }
    return out;
}

Tensor render_relit(const PointCloudPBR& cloud, const RelitCamera& cam, const LightRig& rig, double splat_radius,
                    const Eigen::Vector3d& background, Tensor* coverage_out) {
    if (cloud.size() == 0) throw ContractError("render_relit: empty point cloud");
    if (cam.height <= 0 || cam.width <= 0) throw ConfigError("render_relit: non-positive image extents");
    if (cam.intrinsics.fx <= 0.0 || cam.intrinsics.fy <= 0.0)
        throw ConfigError("render_relit: non-positive focal length");
    if ((cam.pose.rot.transpose() * cam.pose.rot - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9)
        throw ContractError("render_relit: rotation is not orthonormal");
    rig.validate();

    const int h = cam.height, w = cam.width;
    const long long hw = static_cast<long long>(h) * w;
    const Eigen::Matrix3d world_to_cam = cam.pose.rot.transpose();
    std::vector<double> zbuf(hw, std::numeric_limits<double>::infinity());
    std::vector<long long> owner(hw, -1);

    for (size_t i = 0; i < cloud.size(); ++i) {
        const Eigen::Vector3d pc = world_to_cam * (cloud.positions[i] - cam.pose.trans);
        if (pc.z() <= 0.0) continue;
        const double u = cam.intrinsics.fx * pc.x() / pc.z() + cam.intrinsics.cx;
        const double v = cam.intrinsics.fy * pc.y() / pc.z() + cam.intrinsics.cy;
        const int x0 = std::max(0, static_cast<int>(std::ceil(u - splat_radius - 0.5)));
        const int x1 = std::min(w - 1, static_cast<int>(std::floor(u + splat_radius - 0.5)));
        const int y0 = std::max(0, static_cast<int>(std::ceil(v - splat_radius - 0.5)));
        const int y1 = std::min(h - 1, static_cast<int>(std::floor(v + splat_radius - 0.5)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double du = u - (x + 0.5), dv = v - (y + 0.5);
                if (du * du + dv * dv > splat_radius * splat_radius) continue;
                const long long p = static_cast<long long>(y) * w + x;
                if (pc.z() < zbuf[p]) {
                    zbuf[p] = pc.z();
                    owner[p] = static_cast<long long>(i);
                }
            }
    }

    Tensor img = Tensor::zeros({3, h, w});
    Tensor cover = Tensor::zeros({h, w});
    for (long long p = 0; p < hw; ++p) {
        Eigen::Vector3d rgb = background;
        if (owner[p] >= 0) {
            const size_t i = static_cast<size_t>(owner[p]);
            const Eigen::Vector3d view_dir = (cam.pose.trans - cloud.positions[i]).normalized();
            rgb = shade_point(cloud.positions[i], cloud.albedo[i], cloud.metallic[i], cloud.roughness[i],
                              cloud.normal_world[i], view_dir, rig);
            cover.at(p) = 1.0;
        }
        for (int c = 0; c < 3; ++c) img.at(c * hw + p) = rgb[c];
    }
    if (coverage_out) *coverage_out = cover;
    return img;
}

std::vector<Tensor> edit_material(const std::vector<CameraView>& views, const std::vector<Tensor>& images,
                                  const IntrinsicSet& preds, const EditRegion& region,
                                  const Eigen::Vector3d& new_albedo, bool* empty_warning) {
    if (views.empty()) throw ContractError("edit_material: no views");
    if (images.size() != views.size() || preds.num_views() != views.size())
        throw ContractError("edit_material: view/image/prediction count mismatch");
    if (region.radius < 0.0) throw ConfigError("edit_material: negative region radius");
    if (empty_warning) *empty_warning = false;

    std::vector<Tensor> edited;
    edited.reserve(views.size());
    long long touched = 0;
    for (size_t i = 0; i < views.size(); ++i) {
        Tensor valid;
        const Tensor pts = backproject(views[i], &valid);
        const long long hw = static_cast<long long>(views[i].height()) * views[i].width();
        Tensor out = Tensor::zeros({3, views[i].height(), views[i].width()});
        for (long long p = 0; p < hw; ++p) {
            bool inside = false;
            if (valid.at(p) > 0.5)
                inside = region.contains({pts.at(p), pts.at(hw + p), pts.at(2 * hw + p)});
            if (inside) ++touched;
            for (int c = 0; c < 3; ++c)
                out.at(c * hw + p) = inside ? new_albedo[c] * preds.shading[i].at(c * hw + p)
                                            : images[i].at(c * hw + p);
        }
        edited.push_back(out);
    }
    if (touched == 0) {
        std::cerr << "edit_material: region selects no pixel in any view; returning inputs unchanged\n";
        if (empty_warning) *empty_warning = true;
        return images;
    }
    return edited;
}

}  // namespace mvir
