#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsdm/box.hpp"
#include "fsdm/manifest.hpp"

namespace fsdm::data {

// Canonical shape names the renderer knows how to draw, in catalogue order.
const std::vector<std::string>& shape_catalogue();

struct GenConfig {
    int num_images = 200;
    int image_size = 128;  // multiple of 32, at least 64
    std::vector<std::string> categories = shape_catalogue();
    int min_objects = 1;
    int max_objects = 4;
    double min_side = 12.0;
    double max_side = 56.0;
    double noise_level = 0.06;
    std::uint64_t seed = 1;
};

void validate(const GenConfig& cfg);
nlohmann::json gen_config_to_json(const GenConfig& cfg);
// Starts from defaults and overrides the keys present in `j`.
GenConfig gen_config_from_json(const nlohmann::json& j);

struct RenderedImage {
    std::vector<unsigned char> rgb;  // image_size x image_size, RGB8
    std::vector<BoxAnnotation> boxes;
    int skipped = 0;  // objects dropped after exhausting placement retries
};

// Renders image `index` of the virtual dataset defined by `cfg`. Depends only
// on (cfg, index), so any image can be reproduced without the files.
RenderedImage render_image(const GenConfig& cfg, int index);

// Writes PNGs under <out_dir>/images plus <out_dir>/manifest.jsonl.
DatasetManifest generate_shapeworld(const GenConfig& cfg, const std::string& out_dir);

}  // namespace fsdm::data
