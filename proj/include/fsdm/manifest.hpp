#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsdm/box.hpp"

namespace fsdm::data {

struct CategoryDef {
    int id = 0;
    std::string name;
};

struct ImageRecord {
    std::string id;
    std::string path;  // relative to the manifest's directory
    int width = 0;
    int height = 0;
    std::vector<BoxAnnotation> boxes;
};

// JSONL dataset index: one header line (version, seed, generator config,
// category table with dense ids from 0), then one line per image.
struct DatasetManifest {
    int version = 1;
    std::uint64_t seed = 0;
    nlohmann::json config;
    std::vector<CategoryDef> categories;
    std::vector<ImageRecord> images;

    // Directory the manifest was loaded from; empty until load/save.
    std::string root;

    std::string image_path(int index) const;
};

void save_manifest(const DatasetManifest& manifest, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

}  // namespace fsdm::data
