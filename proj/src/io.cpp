#include "mvir/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace mvir {

namespace {

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string view_name(const char* stem, size_t i) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%03zu.pfm", stem, i);
    return buf;
}

}  // namespace

void write_pfm(const std::string& path, const Tensor& t) {
    int c, h, w;
    if (t.ndim() == 2) {
        c = 1, h = t.dim(0), w = t.dim(1);
    } else if (t.ndim() == 3 && (t.dim(0) == 1 || t.dim(0) == 3)) {
        c = t.dim(0), h = t.dim(1), w = t.dim(2);
    } else {
        throw ShapeError("write_pfm: expected [H,W], [1,H,W] or [3,H,W]");
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_pfm: cannot open " + path);
    f << (c == 3 ? "PF" : "Pf") << "\n" << w << " " << h << "\n-1.0\n";
    const long long hw = static_cast<long long>(h) * w;
    std::vector<float> row(static_cast<size_t>(w) * c);
    for (int y = h - 1; y >= 0; --y) {  // PFM scanlines run bottom to top
        for (int x = 0; x < w; ++x)
            for (int ci = 0; ci < c; ++ci)
                row[static_cast<size_t>(x) * c + ci] = static_cast<float>(t.at(ci * hw + y * w + x));
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * 4));
    }
    if (!f) throw IoError("write_pfm: write failed for " + path);
}

Tensor read_pfm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_pfm: cannot open " + path);
    std::string magic;
    int w = 0, h = 0;
    double scale = 0;
    f >> magic >> w >> h >> scale;
    if (!f || (magic != "Pf" && magic != "PF")) throw IoError("read_pfm: bad header in " + path);
    if (w <= 0 || h <= 0) throw IoError("read_pfm: bad extents in " + path);
    if (scale >= 0) throw IoError("read_pfm: big-endian payload not supported: " + path);
    f.get();  // single whitespace after the scale
    const int c = magic == "PF" ? 3 : 1;
    Tensor out = c == 3 ? Tensor::zeros({3, h, w}) : Tensor::zeros({h, w});
    const long long hw = static_cast<long long>(h) * w;
    std::vector<float> row(static_cast<size_t>(w) * c);
    for (int y = h - 1; y >= 0; --y) {
        f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * 4));
        if (!f) throw IoError("read_pfm: truncated payload in " + path);
        for (int x = 0; x < w; ++x)
            for (int ci = 0; ci < c; ++ci)
                out.at(ci * hw + y * w + x) = row[static_cast<size_t>(x) * c + ci];
    }
    return out;
}

void write_png(const std::string& path, const Tensor& img) {
    int c, h, w;
    if (img.ndim() == 2) {
        c = 1, h = img.dim(0), w = img.dim(1);
    } else if (img.ndim() == 3 && (img.dim(0) == 1 || img.dim(0) == 3)) {
        c = img.dim(0), h = img.dim(1), w = img.dim(2);
    } else {
        throw ShapeError("write_png: expected [H,W], [1,H,W] or [3,H,W]");
    }
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("write_png: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("write_png: encoder failure for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const long long hw = static_cast<long long>(h) * w;
    std::vector<png_byte> row(static_cast<size_t>(w) * c);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int ci = 0; ci < c; ++ci) {
                const double v = std::clamp(img.at(ci * hw + y * w + x), 0.0, 1.0);
                row[static_cast<size_t>(x) * c + ci] = static_cast<png_byte>(std::lround(v * 255.0));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

Tensor read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("read_png: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("read_png: decoder failure for " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int c = static_cast<int>(png_get_channels(png, info));
    if (c != 1 && c != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("read_png: unsupported channel count in " + path);
    }
    Tensor out = c == 3 ? Tensor::zeros({3, h, w}) : Tensor::zeros({h, w});
    const long long hw = static_cast<long long>(h) * w;
    std::vector<png_byte> row(static_cast<size_t>(w) * c);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int ci = 0; ci < c; ++ci)
                out.at(ci * hw + y * w + x) = row[static_cast<size_t>(x) * c + ci] / 255.0;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return out;
}

void write_cameras(const std::string& path, const Pinhole& intr, const std::vector<Pose>& poses) {
    std::ofstream f(path);
    if (!f) throw IoError("write_cameras: cannot open " + path);
    f << "intrinsics " << fmt_double(intr.fx) << " " << fmt_double(intr.fy) << " " << fmt_double(intr.cx) << " "
      << fmt_double(intr.cy) << "\n";
    f << "views " << poses.size() << "\n";
    for (const auto& p : poses) {
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) f << fmt_double(p.rot(r, c)) << " ";
        f << fmt_double(p.trans.x()) << " " << fmt_double(p.trans.y()) << " " << fmt_double(p.trans.z()) << "\n";
    }
    if (!f) throw IoError("write_cameras: write failed for " + path);
}

std::pair<Pinhole, std::vector<Pose>> read_cameras(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("read_cameras: cannot open " + path);
    std::string tag;
    Pinhole intr;
    size_t n = 0;
    f >> tag >> intr.fx >> intr.fy >> intr.cx >> intr.cy;
    if (!f || tag != "intrinsics") throw IoError("read_cameras: bad intrinsics line in " + path);
    f >> tag >> n;
    if (!f || tag != "views") throw IoError("read_cameras: bad view count line in " + path);
    std::vector<Pose> poses(n);
    for (auto& p : poses) {
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) f >> p.rot(r, c);
        f >> p.trans.x() >> p.trans.y() >> p.trans.z();
    }
    if (!f) throw IoError("read_cameras: truncated camera table in " + path);
    return {intr, poses};
}

Config Config::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("Config::load: cannot open " + path);
    Config cfg;
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        const auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("Config::load: missing '=' at " + path + ":" + std::to_string(lineno));
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError("Config::load: empty key at " + path + ":" + std::to_string(lineno));
        cfg.kv_[key] = trim(line.substr(eq + 1));
    }
    return cfg;
}

std::string Config::get_str(const std::string& key, const std::string& fallback) const {
    const auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
}

long long Config::get_int(const std::string& key, long long fallback) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    size_t pos = 0;
    long long v = 0;
    try {
        v = std::stoll(it->second, &pos);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not an integer: " + it->second);
    }
    if (pos != it->second.size()) throw ConfigError("config key '" + key + "': not an integer: " + it->second);
    return v;
}

double Config::get_double(const std::string& key, double fallback) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(it->second, &pos);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not a number: " + it->second);
    }
    if (pos != it->second.size()) throw ConfigError("config key '" + key + "': not a number: " + it->second);
    return v;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
    const auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config key '" + key + "': not a boolean: " + it->second);
}

void save_scene_views(const std::string& dir, const Pinhole& intr, const std::vector<ViewBundle>& views) {
    if (views.empty()) throw ContractError("save_scene_views: no views");
    fs::create_directories(dir);
    std::vector<Pose> poses;
    for (const auto& v : views) poses.push_back(v.pose);
    write_cameras(dir + "/cameras.txt", intr, poses);
    for (size_t i = 0; i < views.size(); ++i) {
        const ViewBundle& v = views[i];
        write_pfm(dir + "/" + view_name("rgb", i), v.rgb);
        write_pfm(dir + "/" + view_name("albedo", i), v.albedo);
        write_pfm(dir + "/" + view_name("metallic", i), v.metallic);
        write_pfm(dir + "/" + view_name("roughness", i), v.roughness);
        write_pfm(dir + "/" + view_name("normal", i), v.normal_cam);
        write_pfm(dir + "/" + view_name("shading", i), v.shading);
        write_pfm(dir + "/" + view_name("depth", i), v.depth);
        write_pfm(dir + "/" + view_name("mask", i), v.mask);
        char png_name[32];
        std::snprintf(png_name, sizeof(png_name), "preview_%03zu.png", i);
        write_png(dir + "/" + png_name, v.rgb);
        if (v.flow_to_next.defined() && v.flow_valid.defined()) {
            const int h = v.flow_valid.dim(0), w = v.flow_valid.dim(1);
            const long long hw = static_cast<long long>(h) * w;
            Tensor packed = Tensor::zeros({3, h, w});  // (u, v, validity)
            for (long long p = 0; p < hw; ++p) {
                packed.at(p) = v.flow_to_next.at(p);
                packed.at(hw + p) = v.flow_to_next.at(hw + p);
                packed.at(2 * hw + p) = v.flow_valid.at(p);
            }
            write_pfm(dir + "/" + view_name("flow", i), packed);
        }
    }
}

std::vector<ViewBundle> load_scene_views(const std::string& dir) {
    auto [intr, poses] = read_cameras(dir + "/cameras.txt");
    if (poses.empty()) throw IoError("load_scene_views: no views in " + dir);
    std::vector<ViewBundle> views(poses.size());
    for (size_t i = 0; i < poses.size(); ++i) {
        ViewBundle& v = views[i];
        v.intrinsics = intr;
        v.pose = poses[i];
        v.rgb = read_pfm(dir + "/" + view_name("rgb", i));
        v.albedo = read_pfm(dir + "/" + view_name("albedo", i));
        v.normal_cam = read_pfm(dir + "/" + view_name("normal", i));
        v.shading = read_pfm(dir + "/" + view_name("shading", i));
        v.depth = read_pfm(dir + "/" + view_name("depth", i));
        v.mask = read_pfm(dir + "/" + view_name("mask", i));
        const int h = v.depth.dim(0), w = v.depth.dim(1);
        v.metallic = reshape(read_pfm(dir + "/" + view_name("metallic", i)), {1, h, w});
        v.roughness = reshape(read_pfm(dir + "/" + view_name("roughness", i)), {1, h, w});
        v.specular = Tensor::zeros({3, h, w});  // not archived; only rgb-composition tests need it
        const std::string flow_path = dir + "/" + view_name("flow", i);
        if (fs::exists(flow_path)) {
            Tensor packed = read_pfm(flow_path);
            const long long hw = static_cast<long long>(h) * w;
            v.flow_to_next = Tensor::zeros({2, h, w});
            v.flow_valid = Tensor::zeros({h, w});
            for (long long p = 0; p < hw; ++p) {
                v.flow_to_next.at(p) = packed.at(p);
                v.flow_to_next.at(hw + p) = packed.at(hw + p);
                v.flow_valid.at(p) = packed.at(2 * hw + p);
            }
        }
    }
    return views;
}

std::vector<std::string> list_scene_dirs(const std::string& root) {
    if (!fs::is_directory(root)) throw IoError("list_scene_dirs: not a directory: " + root);
    std::vector<std::string> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory() && e.path().filename().string().rfind("scene_", 0) == 0)
            dirs.push_back(e.path().string());
    std::sort(dirs.begin(), dirs.end());
    return dirs;
}

void write_report(const std::string& path, const std::string& title,
                  const std::vector<std::pair<std::string, double>>& rows) {
    std::ofstream f(path);
    if (!f) throw IoError("write_report: cannot open " + path);
    size_t width = 4;
    for (const auto& [k, _] : rows) width = std::max(width, k.size());
    f << title << "\n";
    for (size_t i = 0; i < title.size(); ++i) f << '-';
    f << "\n";
    for (const auto& [k, v] : rows) f << k << std::string(width - k.size() + 2, ' ') << fmt_double(v) << "\n";
    if (!f) throw IoError("write_report: write failed for " + path);
}

std::string format_record(const std::vector<std::pair<std::string, double>>& fields) {
    std::string out;
    for (const auto& [k, v] : fields) {
        if (!out.empty()) out += ' ';
        out += k + "=" + fmt_double(v);
    }
    return out;
}

}  // namespace mvir
