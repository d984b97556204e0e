#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cffa/box.hpp"
#include "cffa/rng.hpp"
#include "cffa/tensor.hpp"

namespace cffa {

struct Annotation {
    BBox box;
    std::size_t category = 0;
};

/// One image with labels. Annotation access is counted so tests can prove
/// the training path never touches target-domain labels.
struct Sample {
    std::string id;
    std::size_t height = 0, width = 0;
    std::vector<double> pixels;  // [3,H,W] row-major, values in [0,1]

    const std::vector<Annotation>& annotations() const {
        ++annotation_reads;
        return anns_;
    }
    void set_annotations(std::vector<Annotation> a) { anns_ = std::move(a); }

    mutable std::size_t annotation_reads = 0;

    double& at(std::size_t c, std::size_t y, std::size_t x) {
        return pixels[(c * height + y) * width + x];
    }
    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return pixels[(c * height + y) * width + x];
    }

    TensorPtr to_tensor() const {
        return make_tensor({1, 3, height, width}, pixels);
    }

private:
    std::vector<Annotation> anns_;
};

using Dataset = std::vector<Sample>;

inline void reset_annotation_reads(const Dataset& ds) {
    for (const auto& s : ds) s.annotation_reads = 0;
}

inline std::size_t total_annotation_reads(const Dataset& ds) {
    std::size_t n = 0;
    for (const auto& s : ds) n += s.annotation_reads;
    return n;
}

struct SceneConfig {
    std::size_t image_size = 64;
    std::size_t num_classes = 3;  // 0: disk, 1: square, 2: triangle
    std::size_t min_objects = 1, max_objects = 4;
    double min_size = 14.0, max_size = 26.0;
    double background_level = 0.35;
    double background_texture = 0.06;
    std::size_t placement_retries = 25;
};

struct ShiftConfig {
    double fog_intensity = 0.25;
    double fog_color[3] = {0.95, 0.95, 1.0};
    double noise_sigma = 0.02;
    double hue_rotation = 15.0;  // degrees
};

namespace detail {

// Per-class base colors: saturated, one dominant channel per class.
inline void class_color(std::size_t k, Rng& rng, double rgb[3]) {
    const double hi = 0.78 + 0.18 * rng.uniform();
    const double lo1 = 0.05 + 0.15 * rng.uniform();
    const double lo2 = 0.05 + 0.15 * rng.uniform();
    switch (k % 3) {
        case 0: rgb[0] = hi; rgb[1] = lo1; rgb[2] = lo2; break;
        case 1: rgb[0] = lo1; rgb[1] = hi; rgb[2] = lo2; break;
        default: rgb[0] = lo1; rgb[1] = lo2; rgb[2] = hi; break;
    }
}

inline bool inside_shape(std::size_t k, double px, double py, double x0, double y0, double s) {
    const double cx = x0 + s / 2.0, cy = y0 + s / 2.0;
    switch (k % 3) {
        case 0: {  // disk
            const double dx = px - cx, dy = py - cy;
            return dx * dx + dy * dy <= (s / 2.0) * (s / 2.0);
        }
        case 1:  // square
            return px >= x0 && px < x0 + s && py >= y0 && py < y0 + s;
        default: {  // triangle, apex top-center, base bottom
            if (py < y0 || py >= y0 + s) return false;
            const double t = (py - y0) / s;  // 0 at apex row, 1 at base
            const double half = t * s / 2.0;
            return std::abs(px - cx) <= half;
        }
    }
}

}  // namespace detail

/// Draws one scene deterministically from the seed: textured background plus
/// 1..max_objects colored shapes with tight ground-truth boxes.
inline Sample generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
    Rng rng(seed);
    Sample s;
    s.id = "scene_" + std::to_string(seed);
    s.height = s.width = cfg.image_size;
    s.pixels.assign(3 * cfg.image_size * cfg.image_size, 0.0);

    // Low-frequency textured background.
    const double base = cfg.background_level + 0.08 * (rng.uniform() - 0.5);
    const double gx = rng.uniform(-1.0, 1.0), gy = rng.uniform(-1.0, 1.0);
    const double phase = rng.uniform(0.0, 6.28);
    for (std::size_t y = 0; y < s.height; ++y)
        for (std::size_t x = 0; x < s.width; ++x) {
            const double u = static_cast<double>(x) / cfg.image_size;
            const double v = static_cast<double>(y) / cfg.image_size;
            const double tex = cfg.background_texture *
                               (std::sin(6.0 * u + phase) * std::cos(5.0 * v) + gx * u + gy * v);
            const double jitter = 0.02 * (rng.uniform() - 0.5);
            for (std::size_t c = 0; c < 3; ++c)
                s.at(c, y, x) = std::clamp(base + tex + jitter, 0.0, 1.0);
        }

    const std::size_t want =
        cfg.min_objects + rng.uniform_int(cfg.max_objects - cfg.min_objects + 1);
    std::vector<Annotation> anns;
    for (std::size_t i = 0; i < want; ++i) {
        bool placed = false;
        for (std::size_t attempt = 0; attempt < cfg.placement_retries && !placed; ++attempt) {
            const std::size_t k = rng.uniform_int(cfg.num_classes);
            const double size = rng.uniform(cfg.min_size, cfg.max_size);
            const double x0 = rng.uniform(1.0, cfg.image_size - size - 1.0);
            const double y0 = rng.uniform(1.0, cfg.image_size - size - 1.0);
            BBox cand{x0, y0, x0 + size, y0 + size};
            bool overlaps = false;
            for (const auto& a : anns)
                if (iou(cand, a.box) > 0.15) overlaps = true;
            if (overlaps) continue;

            double rgb[3];
            detail::class_color(k, rng, rgb);
            double minx = 1e9, miny = 1e9, maxx = -1e9, maxy = -1e9;
            for (std::size_t y = 0; y < s.height; ++y)
                for (std::size_t x = 0; x < s.width; ++x) {
                    if (!detail::inside_shape(k, x + 0.5, y + 0.5, x0, y0, size)) continue;
                    for (std::size_t c = 0; c < 3; ++c) s.at(c, y, x) = rgb[c];
                    minx = std::min(minx, static_cast<double>(x));
                    miny = std::min(miny, static_cast<double>(y));
                    maxx = std::max(maxx, static_cast<double>(x));
                    maxy = std::max(maxy, static_cast<double>(y));
                }
            if (maxx < minx) continue;
            BBox tight{minx, miny, maxx + 1.0, maxy + 1.0};
            if (tight.area() < 16.0) continue;
            anns.push_back({tight, k});
            placed = true;
        }
    }
    s.set_annotations(std::move(anns));
    s.annotation_reads = 0;
    return s;
}

/// Pixelwise covariate shift: hue rotation, fog blend, additive noise.
/// Geometry (and therefore every annotation) is preserved verbatim.
inline Sample apply_shift(const Sample& in, const ShiftConfig& shift, std::uint64_t noise_seed) {
    Rng rng(noise_seed);
    Sample out;
    out.id = in.id;
    out.height = in.height;
    out.width = in.width;
    out.pixels.resize(in.pixels.size());

    // Rotation about the gray axis (Rodrigues), angle in degrees.
    const double th = shift.hue_rotation * 3.14159265358979323846 / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    const double k = 1.0 / 3.0, sk = s / std::sqrt(3.0);
    const double m[3][3] = {
        {c + (1 - c) * k, (1 - c) * k - sk, (1 - c) * k + sk},
        {(1 - c) * k + sk, c + (1 - c) * k, (1 - c) * k - sk},
        {(1 - c) * k - sk, (1 - c) * k + sk, c + (1 - c) * k}};

    const std::size_t plane = in.height * in.width;
    for (std::size_t p = 0; p < plane; ++p) {
        double rgb[3];
        for (std::size_t ch = 0; ch < 3; ++ch) {
            rgb[ch] = m[ch][0] * in.pixels[p] + m[ch][1] * in.pixels[plane + p] +
                      m[ch][2] * in.pixels[2 * plane + p];
        }
        for (std::size_t ch = 0; ch < 3; ++ch) {
            double v = (1.0 - shift.fog_intensity) * rgb[ch] +
                       shift.fog_intensity * shift.fog_color[ch];
            if (shift.noise_sigma > 0.0) v += shift.noise_sigma * rng.normal();
            out.pixels[ch * plane + p] = std::clamp(v, 0.0, 1.0);
        }
    }
    out.set_annotations(in.annotations());
    out.annotation_reads = 0;
    return out;
}

// ---------------------------------------------------------------------------
// Persistence: binary PPM images, plain-text annotations, manifest ordering.
// ---------------------------------------------------------------------------

inline void write_ppm(const std::string& path, const Sample& s) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "P6\n" << s.width << " " << s.height << "\n255\n";
    const std::size_t plane = s.height * s.width;
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < 3; ++c) {
            const int q = static_cast<int>(std::lround(s.pixels[c * plane + p] * 255.0));
            f.put(static_cast<char>(std::clamp(q, 0, 255)));
        }
}

inline Sample read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("missing image file " + path);
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255) throw std::runtime_error("bad PPM header in " + path);
    f.get();
    Sample s;
    s.height = h;
    s.width = w;
    s.pixels.resize(3 * h * w);
    const std::size_t plane = h * w;
    std::vector<char> raw(3 * plane);
    f.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!f) throw std::runtime_error("truncated PPM " + path);
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < 3; ++c)
            s.pixels[c * plane + p] = static_cast<unsigned char>(raw[3 * p + c]) / 255.0;
    return s;
}

inline void write_dataset(const Dataset& ds, const std::string& directory) {
    namespace fs = std::filesystem;
    fs::create_directories(directory);
    std::ofstream manifest(directory + "/manifest.txt");
    if (!manifest) throw std::runtime_error("cannot write manifest in " + directory);
    for (const auto& s : ds) {
        write_ppm(directory + "/" + s.id + ".ppm", s);
        std::ofstream ann(directory + "/" + s.id + ".txt");
        for (const auto& a : s.annotations())
            ann << a.category << " " << static_cast<long>(std::lround(a.box.x_min)) << " "
                << static_cast<long>(std::lround(a.box.y_min)) << " "
                << static_cast<long>(std::lround(a.box.x_max)) << " "
                << static_cast<long>(std::lround(a.box.y_max)) << "\n";
        manifest << s.id << "\n";
    }
}

inline Dataset read_dataset(const std::string& directory) {
    std::ifstream manifest(directory + "/manifest.txt");
    if (!manifest) throw std::runtime_error("missing manifest in " + directory);
    Dataset ds;
    std::string id;
    while (std::getline(manifest, id)) {
        if (id.empty()) continue;
        Sample s = read_ppm(directory + "/" + id + ".ppm");
        s.id = id;
        std::ifstream ann(directory + "/" + id + ".txt");
        if (!ann) throw std::runtime_error("missing annotation file for " + id);
        std::vector<Annotation> anns;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(ann, line)) {
            ++lineno;
            if (line.empty()) continue;
            std::istringstream is(line);
            Annotation a;
            long x0, y0, x1, y1;
            if (!(is >> a.category >> x0 >> y0 >> x1 >> y1))
                throw std::runtime_error("malformed annotation at " + id + ".txt:" +
                                         std::to_string(lineno));
            a.box = {static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1),
                     static_cast<double>(y1)};
            anns.push_back(a);
        }
        s.set_annotations(std::move(anns));
        s.annotation_reads = 0;
        ds.push_back(std::move(s));
    }
    return ds;
}

}  // namespace cffa
