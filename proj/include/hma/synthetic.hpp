#pragma once

// Procedural aerial-like scenes with six classes laid out in the order of
// the ISPRS 2D labelling benchmarks. Scenes are painted in layers
// (background, roads, low vegetation, buildings, trees, cars), each class
// drawing its colour from its own distribution. A per-scene illumination
// gain and offset is applied on top, so absolute colour alone is a weak cue.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hma/error.hpp"
#include "hma/hmat.hpp"
#include "hma/rng.hpp"
#include "hma/tensor.hpp"

namespace hma {

inline constexpr std::size_t kSceneClasses = 6;

struct ClassStyle {
    const char* name;
    std::array<std::uint8_t, 3> palette;  // label visualisation colour
};

inline constexpr std::array<ClassStyle, kSceneClasses> kClassStyles{{
    {"clutter", {255, 0, 0}},
    {"impervious_surfaces", {255, 255, 255}},
    {"building", {0, 0, 255}},
    {"low_vegetation", {0, 255, 255}},
    {"tree", {0, 255, 0}},
    {"car", {255, 255, 0}},
}};

enum SceneClass : std::uint8_t { kClutter = 0, kImpervious, kBuilding, kLowVegetation, kTree, kCar };

inline std::vector<std::string> scene_class_names() {
    std::vector<std::string> out;
    for (const auto& s : kClassStyles) out.emplace_back(s.name);
    return out;
}

struct Scene {
    Tensor<float> image;  // [3,H,W], values in [0,1]
    LabelMap labels;      // [H,W]
    std::uint64_t seed = 0;

    std::size_t height() const { return labels.dim(0); }
    std::size_t width() const { return labels.dim(1); }
};

namespace detail {

struct Painter {
    std::size_t h, w;
    std::vector<std::uint8_t> label;
    std::vector<std::uint16_t> style;  // index into the colour table, per pixel

    void rect(std::int64_t y0, std::int64_t x0, std::int64_t y1, std::int64_t x1, std::uint8_t cls, std::uint16_t st) {
        y0 = std::max<std::int64_t>(0, y0);
        x0 = std::max<std::int64_t>(0, x0);
        y1 = std::min<std::int64_t>(static_cast<std::int64_t>(h), y1);
        x1 = std::min<std::int64_t>(static_cast<std::int64_t>(w), x1);
        for (std::int64_t y = y0; y < y1; ++y)
            for (std::int64_t x = x0; x < x1; ++x) set(y, x, cls, st);
    }

    void ellipse(double cy, double cx, double ry, double rx, std::uint8_t cls, std::uint16_t st) {
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
                const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
                if (dy * dy + dx * dx <= 1.0) set(static_cast<std::int64_t>(y), static_cast<std::int64_t>(x), cls, st);
            }
    }

    void set(std::int64_t y, std::int64_t x, std::uint8_t cls, std::uint16_t st) {
        label[y * w + x] = cls;
        style[y * w + x] = st;
    }
};

struct Appearance {
    std::array<double, 3> mean;
    double noise;
};

// Per-class colour distributions. Buildings have two roof styles, one of
// which is close to the road colour.
inline constexpr std::array<Appearance, 7> kAppearance{{
    {{0.52, 0.44, 0.34}, 0.07},  // clutter: bare soil
    {{0.62, 0.62, 0.64}, 0.05},  // impervious
    {{0.74, 0.34, 0.28}, 0.05},  // building, red roof
    {{0.46, 0.64, 0.34}, 0.06},  // low vegetation
    {{0.20, 0.42, 0.20}, 0.10},  // tree, strong texture
    {{0.22, 0.28, 0.72}, 0.06},  // car
    {{0.56, 0.56, 0.60}, 0.05},  // building, grey roof
}};

}  // namespace detail

/// Deterministic scene of size h x w (both >= 32 and divisible by 8).
inline Scene generate_scene(std::uint64_t seed, std::size_t h, std::size_t w) {
    if (h < 32 || w < 32 || h % 8 != 0 || w % 8 != 0)
        throw UsageError("scene size must be at least 32x32 and divisible by 8, got " + std::to_string(h) + "x" +
                         std::to_string(w));
    Rng rng(seed);
    const double s = static_cast<double>(std::min(h, w)) / 64.0;
    const auto H = static_cast<std::int64_t>(h), W = static_cast<std::int64_t>(w);
    detail::Painter p{h, w, std::vector<std::uint8_t>(h * w, kClutter), std::vector<std::uint16_t>(h * w, 0)};

    // Roads: full-length horizontal and vertical strips.
    struct Strip {
        bool horizontal;
        std::int64_t lo, hi;
    };
    std::vector<Strip> roads;
    const int n_roads = 1 + static_cast<int>(rng.below(3));
    for (int i = 0; i < n_roads; ++i) {
        const bool horiz = rng.bernoulli(0.5);
        const auto width = static_cast<std::int64_t>(std::round(rng.uniform(4.0, 8.0) * s));
        const std::int64_t extent = horiz ? H : W;
        const std::int64_t lo = rng.range(0, std::max<std::int64_t>(0, extent - width));
        roads.push_back({horiz, lo, lo + width});
        if (horiz)
            p.rect(lo, 0, lo + width, W, kImpervious, 1);
        else
            p.rect(0, lo, H, lo + width, kImpervious, 1);
    }

    const int n_lowveg = 2 + static_cast<int>(rng.below(3));
    for (int i = 0; i < n_lowveg; ++i)
        p.ellipse(rng.uniform(0, static_cast<double>(h)), rng.uniform(0, static_cast<double>(w)),
                  rng.uniform(5, 12) * s, rng.uniform(5, 12) * s, kLowVegetation, 3);

    const int n_buildings = 1 + static_cast<int>(rng.below(3));
    for (int i = 0; i < n_buildings; ++i) {
        const auto bh = static_cast<std::int64_t>(std::round(rng.uniform(9, 20) * s));
        const auto bw = static_cast<std::int64_t>(std::round(rng.uniform(9, 20) * s));
        const std::int64_t y0 = rng.range(0, std::max<std::int64_t>(0, H - bh));
        const std::int64_t x0 = rng.range(0, std::max<std::int64_t>(0, W - bw));
        p.rect(y0, x0, y0 + bh, x0 + bw, kBuilding, rng.bernoulli(0.5) ? 2 : 6);
    }

    const int n_trees = 2 + static_cast<int>(rng.below(4));
    for (int i = 0; i < n_trees; ++i) {
        const double r = rng.uniform(3, 6) * s;
        p.ellipse(rng.uniform(0, static_cast<double>(h)), rng.uniform(0, static_cast<double>(w)), r, r, kTree, 4);
    }

    // Cars sit on the roads, aligned with the road direction.
    const int n_cars = 4 + static_cast<int>(rng.below(5));
    for (int i = 0; i < n_cars; ++i) {
        const Strip& road = roads[rng.below(roads.size())];
        const auto len = static_cast<std::int64_t>(std::round(rng.uniform(4, 6) * s));
        const auto wid = std::max<std::int64_t>(2, static_cast<std::int64_t>(std::round(2.5 * s)));
        const std::int64_t across = rng.range(road.lo, std::max(road.lo, road.hi - wid));
        const std::int64_t along = rng.range(0, (road.horizontal ? W : H) - len);
        if (road.horizontal)
            p.rect(across, along, across + wid, along + len, kCar, 5);
        else
            p.rect(along, across, along + len, across + wid, kCar, 5);
    }

    const double gain = rng.uniform(0.75, 1.25);
    const double offset = rng.uniform(-0.08, 0.08);
    std::array<double, 3> tint{};
    for (auto& v : tint) v = rng.uniform(-0.05, 0.05);

    Scene sc{Tensor<float>({3, h, w}), LabelMap({h, w}, std::vector<std::uint8_t>(p.label)), seed};
    for (std::size_t i = 0; i < h * w; ++i) {
        const auto& app = detail::kAppearance[p.style[i]];
        for (std::size_t c = 0; c < 3; ++c) {
            const double v = (app.mean[c] + tint[c] + rng.normal(0.0, app.noise)) * gain + offset;
            sc.image[c * h * w + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return sc;
}

struct AugmentConfig {
    std::size_t crop_h = 32, crop_w = 32;
    double min_scale = 0.5, max_scale = 2.0;
    double flip_probability = 0.5;
};

namespace detail {

inline std::size_t scaled_extent(std::size_t n, double s) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(n) * s)));
}

}  // namespace detail

/// Horizontal flip with the configured probability, uniform random scale
/// (bilinear for the image, nearest for labels) and a random crop.
inline Scene augment(const Scene& in, std::uint64_t seed, const AugmentConfig& cfg) {
    const std::size_t H = in.height(), W = in.width();
    if (cfg.min_scale <= 0 || cfg.max_scale < cfg.min_scale) throw UsageError("augment: invalid scale range");
    if (detail::scaled_extent(H, cfg.min_scale) < cfg.crop_h || detail::scaled_extent(W, cfg.min_scale) < cfg.crop_w)
        throw UsageError("augment: crop " + std::to_string(cfg.crop_h) + "x" + std::to_string(cfg.crop_w) +
                         " exceeds the smallest scaled size");
    Rng rng(seed);
    const bool flip = rng.bernoulli(cfg.flip_probability);
    const double s = rng.uniform(cfg.min_scale, cfg.max_scale);
    const std::size_t SH = detail::scaled_extent(H, s), SW = detail::scaled_extent(W, s);
    const std::size_t y0 = static_cast<std::size_t>(rng.range(0, static_cast<std::int64_t>(SH - cfg.crop_h)));
    const std::size_t x0 = static_cast<std::size_t>(rng.range(0, static_cast<std::int64_t>(SW - cfg.crop_w)));

    auto src_x = [&](std::size_t x) { return flip ? W - 1 - x : x; };
    const double ry = static_cast<double>(H) / static_cast<double>(SH);
    const double rx = static_cast<double>(W) / static_cast<double>(SW);

    Scene out{Tensor<float>({3, cfg.crop_h, cfg.crop_w}), LabelMap({cfg.crop_h, cfg.crop_w}), in.seed};
    for (std::size_t oy = 0; oy < cfg.crop_h; ++oy)
        for (std::size_t ox = 0; ox < cfg.crop_w; ++ox) {
            const std::size_t sy = oy + y0, sx = ox + x0;
            const std::size_t ny = std::min(H - 1, static_cast<std::size_t>(static_cast<double>(sy) * ry));
            const std::size_t nx = std::min(W - 1, static_cast<std::size_t>(static_cast<double>(sx) * rx));
            out.labels[oy * cfg.crop_w + ox] = in.labels[ny * W + src_x(nx)];

            const double fy = std::clamp((static_cast<double>(sy) + 0.5) * ry - 0.5, 0.0, static_cast<double>(H - 1));
            const double fx = std::clamp((static_cast<double>(sx) + 0.5) * rx - 0.5, 0.0, static_cast<double>(W - 1));
            const auto iy = static_cast<std::size_t>(fy), ix = static_cast<std::size_t>(fx);
            const std::size_t iy1 = std::min(H - 1, iy + 1), ix1 = std::min(W - 1, ix + 1);
            const double wy = fy - static_cast<double>(iy), wx = fx - static_cast<double>(ix);
            for (std::size_t c = 0; c < 3; ++c) {
                const float* plane = in.image.data().data() + c * H * W;
                auto at = [&](std::size_t y, std::size_t x) { return static_cast<double>(plane[y * W + src_x(x)]); };
                double v;
                if (wy == 0.0 && wx == 0.0) {
                    v = at(iy, ix);
                } else {
                    v = (1 - wy) * ((1 - wx) * at(iy, ix) + wx * at(iy, ix1)) +
                        wy * ((1 - wx) * at(iy1, ix) + wx * at(iy1, ix1));
                }
                out.image[(c * cfg.crop_h + oy) * cfg.crop_w + ox] = static_cast<float>(v);
            }
        }
    return out;
}

/// Writes `<prefix>.img.hmat` (f32) and `<prefix>.lbl.hmat` (u8).
inline void save_scene(const std::filesystem::path& prefix, const Scene& s) {
    hmat::save(prefix.string() + ".img.hmat", s.image);
    hmat::save(prefix.string() + ".lbl.hmat", s.labels);
}

inline Scene load_scene(const std::filesystem::path& prefix) {
    auto image = hmat::load<float>(prefix.string() + ".img.hmat");
    auto labels = hmat::load<std::uint8_t>(prefix.string() + ".lbl.hmat");
    if (image.rank() != 3 || image.dim(0) != 3 || labels.rank() != 2 || image.dim(1) != labels.dim(0) ||
        image.dim(2) != labels.dim(1))
        throw FormatError("scene image " + shape_str(image.dims()) + " and labels " + shape_str(labels.dims()) +
                              " do not pair",
                          0);
    for (auto l : labels.data())
        if (l >= kSceneClasses) throw FormatError("label id " + std::to_string(l) + " out of range", 0);
    return Scene{std::move(image), std::move(labels), 0};
}

inline std::string scene_stem(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene_%05zu", index);
    return buf;
}

inline std::uint64_t scene_seed(std::uint64_t dataset_seed, std::size_t index) { return Rng::mix(dataset_seed, index); }

inline std::vector<Scene> generate_scenes(std::uint64_t seed, std::size_t count, std::size_t h, std::size_t w,
                                          std::size_t first_index = 0) {
    std::vector<Scene> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(scene_seed(seed, first_index + i), h, w));
    return out;
}

/// Dataset directory: scene_%05d.{img,lbl}.hmat plus manifest.txt with the
/// count, size and label palette.
inline void save_dataset(const std::filesystem::path& dir, const std::vector<Scene>& scenes, std::uint64_t seed) {
    if (scenes.empty()) throw UsageError("save_dataset: no scenes");
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < scenes.size(); ++i) save_scene(dir / scene_stem(i), scenes[i]);
    std::ofstream m(dir / "manifest.txt");
    m << "count " << scenes.size() << "\n";
    m << "height " << scenes[0].height() << "\n";
    m << "width " << scenes[0].width() << "\n";
    m << "seed " << seed << "\n";
    m << "classes " << kSceneClasses << "\n";
    for (std::size_t k = 0; k < kSceneClasses; ++k) {
        const auto& st = kClassStyles[k];
        m << "palette " << k << ' ' << st.name << ' ' << int(st.palette[0]) << ' ' << int(st.palette[1]) << ' '
          << int(st.palette[2]) << "\n";
    }
    if (!m) throw UsageError("cannot write manifest in " + dir.string());
}

inline std::vector<Scene> load_dataset(const std::filesystem::path& dir) {
    std::ifstream m(dir / "manifest.txt");
    if (!m) throw FormatError("missing manifest.txt in " + dir.string(), 0);
    std::size_t count = 0;
    std::uint64_t seed = 0;
    std::string key;
    while (m >> key) {
        if (key == "count") {
            m >> count;
        } else if (key == "seed") {
            m >> seed;
        } else {
            std::string rest;
            std::getline(m, rest);
        }
    }
    if (count == 0) throw FormatError("manifest lists no scenes", 0);
    std::vector<Scene> out;
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(load_scene(dir / scene_stem(i)));
        out.back().seed = scene_seed(seed, i);
    }
    return out;
}

}  // namespace hma
