#include "fsdm/shapeworld.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <unordered_set>

#include "fsdm/errors.hpp"
#include "fsdm/png_io.hpp"
#include "fsdm/rng.hpp"

namespace fsdm::data {

namespace {

enum class Outline { kCircle, kRing, kPolygon };
enum class Spin { kNone, kJitter, kFree };

// Shape geometry lives in a local frame scaled to fit the unit circle, so a
// placed object never extends past radius side/2 regardless of rotation.
struct ShapeDef {
    Outline outline = Outline::kPolygon;
    Spin spin = Spin::kFree;
    std::vector<std::array<double, 2>> poly;
};

constexpr double kRingInnerRadius = 0.55;
constexpr double kJitterRadians = 15.0 * std::numbers::pi / 180.0;
constexpr double kMaxOverlapIou = 0.15;
constexpr int kPlacementRetries = 25;

std::vector<std::array<double, 2>> star_polygon() {
    std::vector<std::array<double, 2>> v;
    for (int k = 0; k < 5; ++k) {
        double outer = std::numbers::pi / 2 + k * 2 * std::numbers::pi / 5;
        double inner = outer + std::numbers::pi / 5;
        v.push_back({std::cos(outer), std::sin(outer)});
        v.push_back({0.42 * std::cos(inner), 0.42 * std::sin(inner)});
    }
    return v;
}

const std::vector<std::pair<std::string, ShapeDef>>& shape_table() {
    static const std::vector<std::pair<std::string, ShapeDef>> table = [] {
        const double s = 1.0 / std::numbers::sqrt2;
        std::vector<std::pair<std::string, ShapeDef>> t;
        t.push_back({"circle", {Outline::kCircle, Spin::kNone, {}}});
        t.push_back({"square",
                     {Outline::kPolygon, Spin::kJitter, {{-s, -s}, {-s, s}, {s, s}, {s, -s}}}});
        t.push_back({"triangle",
                     {Outline::kPolygon, Spin::kFree,
                      {{0.0, 1.0},
                       {std::cos(7 * std::numbers::pi / 6), std::sin(7 * std::numbers::pi / 6)},
                       {std::cos(11 * std::numbers::pi / 6), std::sin(11 * std::numbers::pi / 6)}}}});
        t.push_back({"cross",
                     {Outline::kPolygon, Spin::kFree,
                      {{0.3, 0.3},
                       {0.3, 0.95},
                       {-0.3, 0.95},
                       {-0.3, 0.3},
                       {-0.95, 0.3},
                       {-0.95, -0.3},
                       {-0.3, -0.3},
                       {-0.3, -0.95},
                       {0.3, -0.95},
                       {0.3, -0.3},
                       {0.95, -0.3},
                       {0.95, 0.3}}}});
        t.push_back({"diamond",
                     {Outline::kPolygon, Spin::kJitter,
                      {{0.0, 1.0}, {-1.0, 0.0}, {0.0, -1.0}, {1.0, 0.0}}}});
        t.push_back({"bar",
                     {Outline::kPolygon, Spin::kFree,
                      {{-0.95, -0.28}, {-0.95, 0.28}, {0.95, 0.28}, {0.95, -0.28}}}});
        t.push_back({"l_shape",
                     {Outline::kPolygon, Spin::kFree,
                      {{-0.68, -0.68},
                       {-0.68, 0.68},
                       {-0.26, 0.68},
                       {-0.26, -0.26},
                       {0.68, -0.26},
                       {0.68, -0.68}}}});
        t.push_back({"t_shape",
                     {Outline::kPolygon, Spin::kFree,
                      {{-0.7, 0.68},
                       {0.7, 0.68},
                       {0.7, 0.26},
                       {0.21, 0.26},
                       {0.21, -0.68},
                       {-0.21, -0.68},
                       {-0.21, 0.26},
                       {-0.7, 0.26}}}});
        t.push_back({"ring", {Outline::kRing, Spin::kNone, {}}});
        t.push_back({"star", {Outline::kPolygon, Spin::kFree, star_polygon()}});
        t.push_back({"h_shape",
                     {Outline::kPolygon, Spin::kFree,
                      {{-0.7, -0.68},
                       {-0.7, 0.68},
                       {-0.28, 0.68},
                       {-0.28, 0.21},
                       {0.28, 0.21},
                       {0.28, 0.68},
                       {0.7, 0.68},
                       {0.7, -0.68},
                       {0.28, -0.68},
                       {0.28, -0.21},
                       {-0.28, -0.21},
                       {-0.28, -0.68}}}});
        return t;
    }();
    return table;
}

const ShapeDef& shape_by_name(const std::string& name) {
    for (const auto& [n, def] : shape_table()) {
        if (n == name) return def;
    }
    throw UsageError("shapeworld: unknown category name '" + name + "'");
}

bool point_in_polygon(const std::vector<std::array<double, 2>>& poly, double x, double y) {
    bool in = false;
    for (size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        double xi = poly[i][0], yi = poly[i][1];
        double xj = poly[j][0], yj = poly[j][1];
        if ((yi > y) != (yj > y)) {
            double t = (y - yi) / (yj - yi);
            if (x < xi + t * (xj - xi)) in = !in;
        }
    }
    return in;
}

bool inside_shape(const ShapeDef& def, double lx, double ly) {
    switch (def.outline) {
        case Outline::kCircle:
            return lx * lx + ly * ly <= 1.0;
        case Outline::kRing: {
            double d2 = lx * lx + ly * ly;
            return d2 <= 1.0 && d2 >= kRingInnerRadius * kRingInnerRadius;
        }
        case Outline::kPolygon:
            return point_in_polygon(def.poly, lx, ly);
    }
    return false;
}

struct Candidate {
    std::vector<int> pixels;  // flat y*size+x indices covered by the shape
    int minx = 0, maxx = 0, miny = 0, maxy = 0;
    std::array<float, 3> color{};
    int category = 0;
};

Box candidate_box(const Candidate& c) {
    Box b;
    b.w = c.maxx - c.minx + 1;
    b.h = c.maxy - c.miny + 1;
    b.cx = c.minx + b.w / 2.0;
    b.cy = c.miny + b.h / 2.0;
    return b;
}

}  // namespace

const std::vector<std::string>& shape_catalogue() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> v;
        for (const auto& [n, def] : shape_table()) v.push_back(n);
        return v;
    }();
    return names;
}

void validate(const GenConfig& cfg) {
    if (cfg.num_images < 1) throw UsageError("shapeworld: num_images must be >= 1");
    if (cfg.image_size < 64 || cfg.image_size % 32 != 0) {
        throw UsageError("shapeworld: image_size must be a multiple of 32 and >= 64, got " +
                         std::to_string(cfg.image_size));
    }
    if (cfg.categories.empty()) throw UsageError("shapeworld: categories must be nonempty");
    std::unordered_set<std::string> seen;
    for (const auto& name : cfg.categories) {
        shape_by_name(name);
        if (!seen.insert(name).second) {
            throw UsageError("shapeworld: duplicate category '" + name + "'");
        }
    }
    if (cfg.min_objects < 0 || cfg.max_objects < cfg.min_objects) {
        throw UsageError("shapeworld: need 0 <= min_objects <= max_objects");
    }
    if (cfg.min_side < 4.0 || cfg.max_side < cfg.min_side ||
        cfg.max_side > cfg.image_size - 8.0) {
        throw UsageError("shapeworld: need 4 <= min_side <= max_side <= image_size-8");
    }
    if (cfg.noise_level < 0.0 || cfg.noise_level > 0.2) {
        throw UsageError("shapeworld: noise_level must lie in [0, 0.2]");
    }
}

nlohmann::json gen_config_to_json(const GenConfig& cfg) {
    return {{"num_images", cfg.num_images},
            {"image_size", cfg.image_size},
            {"categories", cfg.categories},
            {"min_objects", cfg.min_objects},
            {"max_objects", cfg.max_objects},
            {"min_side", cfg.min_side},
            {"max_side", cfg.max_side},
            {"noise_level", cfg.noise_level}};
}

GenConfig gen_config_from_json(const nlohmann::json& j) {
    GenConfig cfg;
    for (const auto& [key, value] : j.items()) {
        if (key == "num_images") cfg.num_images = value.get<int>();
        else if (key == "image_size") cfg.image_size = value.get<int>();
        else if (key == "categories") cfg.categories = value.get<std::vector<std::string>>();
        else if (key == "min_objects") cfg.min_objects = value.get<int>();
        else if (key == "max_objects") cfg.max_objects = value.get<int>();
        else if (key == "min_side") cfg.min_side = value.get<double>();
        else if (key == "max_side") cfg.max_side = value.get<double>();
        else if (key == "noise_level") cfg.noise_level = value.get<double>();
        else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
        else throw UsageError("shapeworld config: unknown key '" + key + "'");
    }
    return cfg;
}

RenderedImage render_image(const GenConfig& cfg, int index) {
    validate(cfg);
    const int size = cfg.image_size;
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(index)));

    std::array<float, 3> bg;
    for (auto& ch : bg) ch = static_cast<float>(rng.uniform(0.10, 0.35));
    std::vector<float> canvas(static_cast<size_t>(size) * size * 3);
    for (int p = 0; p < size * size; ++p) {
        for (int c = 0; c < 3; ++c) canvas[static_cast<size_t>(p) * 3 + c] = bg[c];
    }

    RenderedImage out;
    const int count = rng.uniform_int(cfg.min_objects, cfg.max_objects);
    std::vector<Box> placed;
    for (int obj = 0; obj < count; ++obj) {
        bool done = false;
        for (int attempt = 0; attempt < kPlacementRetries && !done; ++attempt) {
            Candidate cand;
            cand.category = rng.uniform_int(0, static_cast<int>(cfg.categories.size()) - 1);
            const ShapeDef& def = shape_by_name(cfg.categories[cand.category]);
            const double side = rng.uniform(cfg.min_side, cfg.max_side);
            double theta = 0.0;
            if (def.spin == Spin::kJitter) theta = rng.uniform(-kJitterRadians, kJitterRadians);
            if (def.spin == Spin::kFree) theta = rng.uniform(0.0, 2 * std::numbers::pi);
            const double r = side / 2.0;
            const double margin = r + 1.5;
            const double cx = rng.uniform(margin, size - margin);
            const double cy = rng.uniform(margin, size - margin);
            for (auto& ch : cand.color) ch = static_cast<float>(rng.uniform(0.45, 1.0));
            float peak = std::max({cand.color[0], cand.color[1], cand.color[2]});
            if (peak < 0.65f) {
                for (auto& ch : cand.color) ch *= 0.65f / peak;
            }

            const double ct = std::cos(theta), st = std::sin(theta);
            const int x_lo = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
            const int x_hi = std::min(size - 1, static_cast<int>(std::ceil(cx + r + 1)));
            const int y_lo = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
            const int y_hi = std::min(size - 1, static_cast<int>(std::ceil(cy + r + 1)));
            cand.minx = size;
            cand.miny = size;
            cand.maxx = -1;
            cand.maxy = -1;
            for (int py = y_lo; py <= y_hi; ++py) {
                for (int px = x_lo; px <= x_hi; ++px) {
                    const double dx = (px + 0.5 - cx) / r;
                    const double dy = (py + 0.5 - cy) / r;
                    const double lx = dx * ct + dy * st;
                    const double ly = -dx * st + dy * ct;
                    if (!inside_shape(def, lx, ly)) continue;
                    cand.pixels.push_back(py * size + px);
                    cand.minx = std::min(cand.minx, px);
                    cand.maxx = std::max(cand.maxx, px);
                    cand.miny = std::min(cand.miny, py);
                    cand.maxy = std::max(cand.maxy, py);
                }
            }
            if (cand.pixels.empty() || cand.maxx - cand.minx < 2 || cand.maxy - cand.miny < 2) {
                continue;
            }
            const Box box = candidate_box(cand);
            bool collides = false;
            for (const Box& prev : placed) {
                if (iou(box, prev) > kMaxOverlapIou) {
                    collides = true;
                    break;
                }
            }
            if (collides) continue;

            for (int p : cand.pixels) {
                for (int c = 0; c < 3; ++c) canvas[static_cast<size_t>(p) * 3 + c] = cand.color[c];
            }
            placed.push_back(box);
            BoxAnnotation ann;
            ann.cx = box.cx;
            ann.cy = box.cy;
            ann.w = box.w;
            ann.h = box.h;
            ann.category_id = cand.category;
            out.boxes.push_back(ann);
            done = true;
        }
        if (!done) ++out.skipped;
    }

    if (cfg.noise_level > 0.0) {
        for (auto& v : canvas) {
            v = std::clamp(v + static_cast<float>(rng.uniform(-cfg.noise_level, cfg.noise_level)),
                           0.0f, 1.0f);
        }
    }
    out.rgb.resize(canvas.size());
    for (size_t i = 0; i < canvas.size(); ++i) {
        out.rgb[i] = static_cast<unsigned char>(std::lround(canvas[i] * 255.0f));
    }
    return out;
}

DatasetManifest generate_shapeworld(const GenConfig& cfg, const std::string& out_dir) {
    validate(cfg);
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "images");

    DatasetManifest m;
    m.seed = cfg.seed;
    m.config = gen_config_to_json(cfg);
    for (int i = 0; i < static_cast<int>(cfg.categories.size()); ++i) {
        m.categories.push_back({i, cfg.categories[i]});
    }
    int total_skipped = 0;
    for (int i = 0; i < cfg.num_images; ++i) {
        RenderedImage img = render_image(cfg, i);
        total_skipped += img.skipped;
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05d", i);
        ImageRecord rec;
        rec.id = name;
        rec.path = std::string("images/") + name + ".png";
        rec.width = cfg.image_size;
        rec.height = cfg.image_size;
        rec.boxes = std::move(img.boxes);
        write_rgb8((fs::path(out_dir) / rec.path).string(), cfg.image_size, cfg.image_size,
                   img.rgb);
        m.images.push_back(std::move(rec));
    }
    if (total_skipped > 0) {
        std::fprintf(stderr, "shapeworld: skipped %d object placements after retries\n",
                     total_skipped);
    }
    m.root = out_dir;
    save_manifest(m, (fs::path(out_dir) / "manifest.jsonl").string());
    return m;
}

}  // namespace fsdm::data
