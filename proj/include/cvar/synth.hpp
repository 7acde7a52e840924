#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cvar/image.hpp"
#include "cvar/rng.hpp"

namespace cvar {

// Control channels jointly modelled with the image. The integer values are
// the [TYP] token ids and are load-bearing across checkpoints.
enum class ControlKind : int { Mask = 0, Edge = 1, Depth = 2, Normal = 3 };
constexpr int kNumControlKinds = 4;

inline const char* control_kind_name(ControlKind k) {
    switch (k) {
        case ControlKind::Mask: return "mask";
        case ControlKind::Edge: return "edge";
        case ControlKind::Depth: return "depth";
        case ControlKind::Normal: return "normal";
    }
    return "?";
}

inline ControlKind control_kind_from_name(const std::string& s) {
    for (int i = 0; i < kNumControlKinds; ++i) {
        if (s == control_kind_name(static_cast<ControlKind>(i))) return static_cast<ControlKind>(i);
    }
    throw std::invalid_argument("unknown control kind: " + s);
}

struct ControlImage {
    ControlKind kind;
    Image pixels;
};

enum class ShapeKind : int { Circle = 0, Rectangle = 1, Triangle = 2 };

struct Entity {
    ShapeKind kind;
    int color_idx;            // into entity_palette()
    double cx, cy;            // center in [0,1]^2
    double size;              // diameter as a fraction of min(H,W)
    double z;                 // (0,1], smaller is nearer
    double rotation;          // radians
};

struct Scene {
    uint64_t seed = 0;
    std::array<uint8_t, 3> background{0, 0, 0};
    std::vector<Entity> entities;
    int cls = 0;
};

struct SceneConfig {
    int h = 32;
    int w = 32;
    int n_cls = 8;
    int entity_min = 2;
    int entity_max = 5;
    double size_min = 0.30;
    double size_max = 0.75;
    double edge_threshold = 0.25;
    int colormap_nh = 8;
    int colormap_nw = 8;
};

// Colormap capacity: 5 palette levels per channel minus the reserved
// background triple.
constexpr int kColormapCapacity = 124;

inline const std::vector<std::array<uint8_t, 3>>& entity_palette() {
    static const std::vector<std::array<uint8_t, 3>> p = {
        {230, 25, 30},  {60, 180, 75},   {255, 225, 25}, {0, 130, 200},  {245, 130, 48},
        {145, 30, 180}, {70, 240, 240},  {240, 50, 230}, {210, 245, 60}, {0, 128, 128},
    };
    return p;
}

inline const std::vector<std::array<uint8_t, 3>>& background_palette() {
    static const std::vector<std::array<uint8_t, 3>> p = {
        {16, 16, 16}, {44, 44, 44}, {235, 235, 235}, {90, 90, 120},
    };
    return p;
}

// ---- scene generation ----

inline int scene_class_rule(const std::vector<Entity>& es, int n_cls) {
    // fixed composition rule: mixes kinds and colors so labels spread evenly
    int acc = 0;
    for (const Entity& e : es) acc += 3 * e.color_idx + static_cast<int>(e.kind) + 1;
    return acc % n_cls;
}

inline Scene generate_scene(uint64_t seed, const SceneConfig& cfg) {
    if (cfg.entity_min < 1 || cfg.entity_max < cfg.entity_min) {
        throw std::invalid_argument("generate_scene: bad entity count range");
    }
    if (cfg.entity_max > kColormapCapacity) {
        throw std::invalid_argument("generate_scene: entity_max exceeds colormap capacity (124)");
    }
    Rng rng(mix64(seed));
    Scene s;
    s.seed = seed;
    s.background = background_palette()[rng.below_int(static_cast<int>(background_palette().size()))];
    const int count = cfg.entity_min + rng.below_int(cfg.entity_max - cfg.entity_min + 1);
    s.entities.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        Entity e;
        e.kind = static_cast<ShapeKind>(rng.below_int(3));
        e.color_idx = rng.below_int(static_cast<int>(entity_palette().size()));
        e.cx = rng.uniform(0.12, 0.88);
        e.cy = rng.uniform(0.12, 0.88);
        e.size = rng.uniform(cfg.size_min, cfg.size_max);
        e.z = rng.uniform(0.05, 1.0);
        e.rotation = rng.uniform(0.0, 6.283185307179586);
        s.entities.push_back(e);
    }
    s.cls = scene_class_rule(s.entities, cfg.n_cls);
    return s;
}

// Binary coverage test at a pixel center; no anti-aliasing anywhere.
inline bool entity_covers(const Entity& e, double px, double py, int h, int w) {
    const double scale = static_cast<double>(std::min(h, w));
    const double cx = e.cx * w, cy = e.cy * h;
    const double r = 0.5 * e.size * scale;
    const double dx = px - cx, dy = py - cy;
    switch (e.kind) {
        case ShapeKind::Circle:
            return dx * dx + dy * dy <= r * r;
        case ShapeKind::Rectangle: {
            const double c = std::cos(e.rotation), sn = std::sin(e.rotation);
            const double lx = c * dx + sn * dy, ly = -sn * dx + c * dy;
            return std::fabs(lx) <= r && std::fabs(ly) <= r * 0.625;
        }
        case ShapeKind::Triangle: {
            // equilateral triangle with circumradius r
            double vx[3], vy[3];
            for (int k = 0; k < 3; ++k) {
                const double a = e.rotation + 2.0943951023931953 * k - 1.5707963267948966;
                vx[k] = cx + r * std::cos(a);
                vy[k] = cy + r * std::sin(a);
            }
            bool neg = false, pos = false;
            for (int k = 0; k < 3; ++k) {
                const int k2 = (k + 1) % 3;
                const double cr = (vx[k2] - vx[k]) * (py - vy[k]) - (vy[k2] - vy[k]) * (px - vx[k]);
                neg = neg || cr < 0;
                pos = pos || cr > 0;
            }
            return !(neg && pos);
        }
    }
    return false;
}

// Index of the front-most covering entity per pixel, -1 for background.
// Equal z resolves to the lower entity index.
inline std::vector<int> coverage_map(const Scene& s, int h, int w) {
    std::vector<int> owner(static_cast<size_t>(h) * w, -1);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            double best_z = 2.0;
            int best = -1;
            for (size_t i = 0; i < s.entities.size(); ++i) {
                const Entity& e = s.entities[i];
                if (e.z < best_z && entity_covers(e, px, py, h, w)) {
                    best_z = e.z;
                    best = static_cast<int>(i);
                }
            }
            owner[static_cast<size_t>(y) * w + x] = best;
        }
    }
    return owner;
}

inline Image render_image(const Scene& s, const SceneConfig& cfg) {
    Image img(cfg.h, cfg.w);
    const auto owner = coverage_map(s, cfg.h, cfg.w);
    for (int y = 0; y < cfg.h; ++y) {
        for (int x = 0; x < cfg.w; ++x) {
            const int o = owner[static_cast<size_t>(y) * cfg.w + x];
            const auto& c = o < 0 ? s.background : entity_palette()[s.entities[static_cast<size_t>(o)].color_idx];
            img.set(y, x, c[0], c[1], c[2]);
        }
    }
    return img;
}

// ---- pixel-level labels ----

// Disjoint binary instance masks after occlusion, front-most entity first.
// Entities hidden completely by nearer ones produce no mask.
struct EntityMasks {
    int h = 0, w = 0;
    std::vector<std::vector<uint8_t>> masks;
};

inline EntityMasks label_mask(const Scene& s, const SceneConfig& cfg) {
    const auto owner = coverage_map(s, cfg.h, cfg.w);
    std::vector<size_t> order(s.entities.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return s.entities[a].z < s.entities[b].z; });
    EntityMasks out;
    out.h = cfg.h;
    out.w = cfg.w;
    for (size_t oi : order) {
        std::vector<uint8_t> m(static_cast<size_t>(cfg.h) * cfg.w, 0);
        bool any = false;
        for (size_t p = 0; p < m.size(); ++p) {
            if (owner[p] == static_cast<int>(oi)) {
                m[p] = 1;
                any = true;
            }
        }
        if (any) out.masks.push_back(std::move(m));
    }
    return out;
}

inline ControlImage label_depth(const Scene& s, const SceneConfig& cfg) {
    ControlImage out{ControlKind::Depth, Image(cfg.h, cfg.w)};
    const auto owner = coverage_map(s, cfg.h, cfg.w);
    for (size_t p = 0; p < owner.size(); ++p) {
        const int o = owner[p];
        const uint8_t v =
            o < 0 ? 255 : static_cast<uint8_t>(std::lround(s.entities[static_cast<size_t>(o)].z * 255.0));
        out.pixels.px[3 * p] = v;
        out.pixels.px[3 * p + 1] = v;
        out.pixels.px[3 * p + 2] = v;
    }
    return out;
}

inline ControlImage label_normal(const Scene& s, const SceneConfig& cfg) {
    ControlImage out{ControlKind::Normal, Image(cfg.h, cfg.w)};
    const auto owner = coverage_map(s, cfg.h, cfg.w);
    const double scale = static_cast<double>(std::min(cfg.h, cfg.w));
    for (int y = 0; y < cfg.h; ++y) {
        for (int x = 0; x < cfg.w; ++x) {
            const int o = owner[static_cast<size_t>(y) * cfg.w + x];
            double nx = 0, ny = 0, nz = 1;
            if (o >= 0) {
                const Entity& e = s.entities[static_cast<size_t>(o)];
                if (e.kind == ShapeKind::Circle) {
                    // hemisphere normal
                    const double r = 0.5 * e.size * scale;
                    nx = (x + 0.5 - e.cx * cfg.w) / r;
                    ny = (y + 0.5 - e.cy * cfg.h) / r;
                    const double rho2 = nx * nx + ny * ny;
                    nz = std::sqrt(std::max(0.0, 1.0 - rho2));
                } else {
                    // flat shape tilted by a fixed angle in its rotation direction
                    const double tilt = 0.5235987755982988;  // pi/6
                    nx = std::sin(tilt) * std::cos(e.rotation);
                    ny = std::sin(tilt) * std::sin(e.rotation);
                    nz = std::cos(tilt);
                }
            }
            auto to8 = [](double n) { return static_cast<uint8_t>(std::lround((n + 1.0) * 0.5 * 255.0)); };
            out.pixels.set(y, x, to8(nx), to8(ny), to8(nz));
        }
    }
    return out;
}

// Sobel magnitude on [0,1] mean intensity, normalized so a unit step scores
// 1.0, thresholded to a binary 3-channel map. Border pixels clamp.
inline ControlImage label_edges(const Image& img, double threshold) {
    ControlImage out{ControlKind::Edge, Image(img.h, img.w)};
    std::vector<double> lum(static_cast<size_t>(img.h) * img.w);
    for (size_t p = 0; p < lum.size(); ++p) {
        lum[p] = (img.px[3 * p] + img.px[3 * p + 1] + img.px[3 * p + 2]) / (3.0 * 255.0);
    }
    auto at = [&](int y, int x) {
        y = std::clamp(y, 0, img.h - 1);
        x = std::clamp(x, 0, img.w - 1);
        return lum[static_cast<size_t>(y) * img.w + x];
    };
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            const double gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                              (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
            const double gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                              (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
            const double mag = std::sqrt(gx * gx + gy * gy) / 4.0;
            const uint8_t v = mag >= threshold ? 255 : 0;
            out.pixels.set(y, x, v, v, v);
        }
    }
    return out;
}

// ---- position-aware colormap ----

// 124 colors: nested R -> G -> B loops over {0,64,128,192,255}, skipping the
// background triple (0,0,0).
inline const std::vector<std::array<uint8_t, 3>>& colormap_palette() {
    static const std::vector<std::array<uint8_t, 3>> p = [] {
        const uint8_t levels[5] = {0, 64, 128, 192, 255};
        std::vector<std::array<uint8_t, 3>> out;
        for (uint8_t r : levels) {
            for (uint8_t g : levels) {
                for (uint8_t b : levels) {
                    if (r == 0 && g == 0 && b == 0) continue;
                    out.push_back({r, g, b});
                }
            }
        }
        return out;
    }();
    return p;
}

// Region of a mask's centroid (pixel-center convention), row-major grid.
inline int colormap_region(const std::vector<uint8_t>& mask, int h, int w, int n_h, int n_w) {
    double sx = 0, sy = 0;
    long cnt = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (mask[static_cast<size_t>(y) * w + x]) {
                sx += x + 0.5;
                sy += y + 0.5;
                ++cnt;
            }
        }
    }
    if (cnt == 0) throw std::invalid_argument("colormap_region: empty mask");
    const double cx = sx / cnt, cy = sy / cnt;
    const int col = std::min(n_w - 1, static_cast<int>(std::floor(cx / w * n_w)));
    const int row = std::min(n_h - 1, static_cast<int>(std::floor(cy / h * n_h)));
    return row * n_w + col;
}

// Palette color per mask: the centroid's region color, or the next unused
// palette entry (scanning from region+1, wrapping) when taken.
inline std::vector<int> colormap_assign(const EntityMasks& em, int n_h, int n_w) {
    if (n_h * n_w > kColormapCapacity) throw std::invalid_argument("colormap: grid exceeds 124 colors");
    if (static_cast<int>(em.masks.size()) > kColormapCapacity) {
        throw std::invalid_argument("colormap: more than 124 masks");
    }
    std::vector<bool> used(colormap_palette().size(), false);
    std::vector<int> assign;
    assign.reserve(em.masks.size());
    for (const auto& m : em.masks) {
        int idx = colormap_region(m, em.h, em.w, n_h, n_w);
        if (used[static_cast<size_t>(idx)]) {
            const int n = static_cast<int>(used.size());
            int probe = (idx + 1) % n;
            while (probe != idx && used[static_cast<size_t>(probe)]) probe = (probe + 1) % n;
            idx = probe;
        }
        used[static_cast<size_t>(idx)] = true;
        assign.push_back(idx);
    }
    return assign;
}

inline ControlImage encode_colormap(const EntityMasks& em, int n_h, int n_w) {
    const auto assign = colormap_assign(em, n_h, n_w);
    ControlImage out{ControlKind::Mask, Image(em.h, em.w)};
    for (size_t i = 0; i < em.masks.size(); ++i) {
        const auto& c = colormap_palette()[static_cast<size_t>(assign[i])];
        const auto& m = em.masks[i];
        for (size_t p = 0; p < m.size(); ++p) {
            if (m[p]) {
                out.pixels.px[3 * p] = c[0];
                out.pixels.px[3 * p + 1] = c[1];
                out.pixels.px[3 * p + 2] = c[2];
            }
        }
    }
    return out;
}

// Nearest-palette projection per pixel, masks grouped by color in palette
// order. Exact inverse of encode_colormap on clean encodings.
inline EntityMasks decode_colormap(const ControlImage& ci) {
    const Image& img = ci.pixels;
    const auto& pal = colormap_palette();
    std::vector<std::vector<uint8_t>> by_color(pal.size());
    for (size_t p = 0; p < static_cast<size_t>(img.h) * img.w; ++p) {
        const int r = img.px[3 * p], g = img.px[3 * p + 1], b = img.px[3 * p + 2];
        long best = static_cast<long>(r) * r + static_cast<long>(g) * g + static_cast<long>(b) * b;  // background
        int best_idx = -1;
        for (size_t k = 0; k < pal.size(); ++k) {
            const long dr = r - pal[k][0], dg = g - pal[k][1], db = b - pal[k][2];
            const long d = dr * dr + dg * dg + db * db;
            if (d < best) {
                best = d;
                best_idx = static_cast<int>(k);
            }
        }
        if (best_idx >= 0) {
            if (by_color[static_cast<size_t>(best_idx)].empty()) {
                by_color[static_cast<size_t>(best_idx)].resize(static_cast<size_t>(img.h) * img.w, 0);
            }
            by_color[static_cast<size_t>(best_idx)][p] = 1;
        }
    }
    EntityMasks out;
    out.h = img.h;
    out.w = img.w;
    for (auto& m : by_color) {
        if (!m.empty()) out.masks.push_back(std::move(m));
    }
    return out;
}

// ---- full sample + dataset files ----

struct SynthSample {
    Scene scene;
    Image image;
    ControlImage mask, edge, depth, normal;
};

inline SynthSample generate_sample(uint64_t seed, const SceneConfig& cfg) {
    SynthSample s;
    s.scene = generate_scene(seed, cfg);
    s.image = render_image(s.scene, cfg);
    s.mask = encode_colormap(label_mask(s.scene, cfg), cfg.colormap_nh, cfg.colormap_nw);
    s.edge = label_edges(s.image, cfg.edge_threshold);
    s.depth = label_depth(s.scene, cfg);
    s.normal = label_normal(s.scene, cfg);
    return s;
}

inline const Image& control_of(const SynthSample& s, ControlKind k) {
    switch (k) {
        case ControlKind::Mask: return s.mask.pixels;
        case ControlKind::Edge: return s.edge.pixels;
        case ControlKind::Depth: return s.depth.pixels;
        case ControlKind::Normal: return s.normal.pixels;
    }
    throw std::logic_error("control_of: bad kind");
}

struct ManifestRecord {
    int64_t id = 0;
    std::string image, mask, edge, depth, normal;
    int cls = 0;
    uint64_t seed = 0;
};

inline uint64_t dataset_sample_seed(uint64_t master_seed, int64_t index) {
    // i-th output of the splitmix64 stream seeded at master_seed
    return mix64(master_seed + 0x9E3779B97F4A7C15ull * static_cast<uint64_t>(index));
}

inline std::string manifest_line(const ManifestRecord& r) {
    nlohmann::json j;
    j["id"] = r.id;
    j["image"] = r.image;
    j["mask"] = r.mask;
    j["edge"] = r.edge;
    j["depth"] = r.depth;
    j["normal"] = r.normal;
    j["class"] = r.cls;
    j["seed"] = r.seed;
    return j.dump();
}

inline std::vector<ManifestRecord> load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_manifest: cannot open " + path);
    std::vector<ManifestRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const nlohmann::json j = nlohmann::json::parse(line);
        ManifestRecord r;
        r.id = j.at("id").get<int64_t>();
        r.image = j.at("image").get<std::string>();
        r.mask = j.at("mask").get<std::string>();
        r.edge = j.at("edge").get<std::string>();
        r.depth = j.at("depth").get<std::string>();
        r.normal = j.at("normal").get<std::string>();
        r.cls = j.at("class").get<int>();
        r.seed = j.at("seed").get<uint64_t>();
        out.push_back(std::move(r));
    }
    return out;
}

// Writes images plus all four controls as P6 PPM files and a JSON-lines
// manifest. Sample seeds come from the splitmix64 stream, so any subset can
// be regenerated independently.
inline std::vector<ManifestRecord> build_dataset(const SceneConfig& cfg, const std::string& out_dir, int count,
                                                 uint64_t master_seed) {
    std::vector<ManifestRecord> records;
    std::ofstream mf(out_dir + "/manifest.jsonl");
    if (!mf) throw std::runtime_error("build_dataset: cannot write manifest in " + out_dir);
    for (int i = 0; i < count; ++i) {
        const uint64_t seed = dataset_sample_seed(master_seed, i);
        const SynthSample s = generate_sample(seed, cfg);
        char base[32];
        std::snprintf(base, sizeof(base), "%06d", i);
        ManifestRecord r;
        r.id = i;
        r.image = std::string(base) + "_image.ppm";
        r.mask = std::string(base) + "_mask.ppm";
        r.edge = std::string(base) + "_edge.ppm";
        r.depth = std::string(base) + "_depth.ppm";
        r.normal = std::string(base) + "_normal.ppm";
        r.cls = s.scene.cls;
        r.seed = seed;
        write_ppm(out_dir + "/" + r.image, s.image);
        write_ppm(out_dir + "/" + r.mask, s.mask.pixels);
        write_ppm(out_dir + "/" + r.edge, s.edge.pixels);
        write_ppm(out_dir + "/" + r.depth, s.depth.pixels);
        write_ppm(out_dir + "/" + r.normal, s.normal.pixels);
        mf << manifest_line(r) << "\n";
        records.push_back(std::move(r));
    }
    return records;
}

}  // namespace cvar
