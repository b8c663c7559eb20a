#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace mvir {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kMinRoughness = 0.05;  // GGX singularity guard
inline constexpr double kDielectricF0 = 0.04;

/// F0 = 0.04*(1-metallic) + albedo*metallic
inline Eigen::Vector3d fresnel_f0(const Eigen::Vector3d& albedo, double metallic) {
    return Eigen::Vector3d::Constant(kDielectricF0 * (1.0 - metallic)) + albedo * metallic;
}

inline Eigen::Vector3d fresnel_schlick(const Eigen::Vector3d& f0, double cos_theta) {
    const double f = std::pow(std::clamp(1.0 - cos_theta, 0.0, 1.0), 5.0);
    return f0 + (Eigen::Vector3d::Ones() - f0) * f;
}

inline double ggx_ndf(double n_dot_h, double roughness) {
    const double a = roughness * roughness;
    const double a2 = a * a;
    const double d = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    return a2 / (kPi * d * d);
}

inline double smith_g1(double n_dot_x, double roughness) {
    const double a = roughness * roughness;
    const double k = a / 2.0;
    return n_dot_x / (n_dot_x * (1.0 - k) + k);
}

/// Cook-Torrance GGX specular lobe value (without the incident cosine).
/// n, v, l unit; returns per-channel BRDF value.
inline Eigen::Vector3d cook_torrance_specular(const Eigen::Vector3d& n, const Eigen::Vector3d& v,
                                              const Eigen::Vector3d& l, const Eigen::Vector3d& albedo,
                                              double metallic, double roughness) {
    const double n_dot_v = n.dot(v);
    const double n_dot_l = n.dot(l);
    if (n_dot_v <= 0.0 || n_dot_l <= 0.0) return Eigen::Vector3d::Zero();
    const Eigen::Vector3d h = (v + l).normalized();
    const double n_dot_h = std::max(0.0, n.dot(h));
    const double v_dot_h = std::max(0.0, v.dot(h));
    const double d = ggx_ndf(n_dot_h, roughness);
    const double g = smith_g1(n_dot_v, roughness) * smith_g1(n_dot_l, roughness);
    const Eigen::Vector3d f = fresnel_schlick(fresnel_f0(albedo, metallic), v_dot_h);
    return f * (d * g / (4.0 * n_dot_v * n_dot_l));
}

}  // namespace mvir
