#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mvir/scene.hpp"
#include "mvir/tensor.hpp"

namespace mvir {

/// Portable float map. [H,W] and [1,H,W] write the grayscale variant (Pf),
/// [3,H,W] the color variant (PF). Little-endian payload, scanlines bottom to
/// top, values narrowed to float32. Flow fields are stored as PF with
/// channels (u, v, validity) since the format has no two-channel variant.
void write_pfm(const std::string& path, const Tensor& t);

/// Returns [H,W] for Pf files and [3,H,W] for PF files.
Tensor read_pfm(const std::string& path);

/// 8-bit PNG; [H,W]/[1,H,W] gray, [3,H,W] RGB. Values clamped to [0,1] and
/// rounded to 255 steps.
void write_png(const std::string& path, const Tensor& img);
Tensor read_png(const std::string& path);  // [H,W] or [3,H,W], values k/255

/// Plain-text camera table: intrinsics line, view count, then one
/// camera-to-world line per view (9 rotation entries row-major + 3
/// translation). Round-trips doubles exactly.
void write_cameras(const std::string& path, const Pinhole& intr, const std::vector<Pose>& poses);
std::pair<Pinhole, std::vector<Pose>> read_cameras(const std::string& path);

/// Flat key=value configuration ('#' comments, blank lines skipped, later
/// keys win). Typed getters fall back to the given default when the key is
/// absent and throw ConfigError on unparsable values.
class Config {
public:
    Config() = default;
    static Config load(const std::string& path);

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    bool has(const std::string& key) const { return kv_.count(key) > 0; }
    std::string get_str(const std::string& key, const std::string& fallback) const;
    long long get_int(const std::string& key, long long fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

/// One scene directory: cameras.txt, per-view PFM maps, PNG previews, and
/// (u,v,valid) flow PFMs for consecutive pairs.
void save_scene_views(const std::string& dir, const Pinhole& intr, const std::vector<ViewBundle>& views);
std::vector<ViewBundle> load_scene_views(const std::string& dir);

/// Sorted scene_NNNN subdirectories of an archive root.
std::vector<std::string> list_scene_dirs(const std::string& root);

/// Human-readable metric table (name, value) rows.
void write_report(const std::string& path, const std::string& title,
                  const std::vector<std::pair<std::string, double>>& rows);

/// One line-delimited record, "k=v" pairs in the given order.
std::string format_record(const std::vector<std::pair<std::string, double>>& fields);

}  // namespace mvir
