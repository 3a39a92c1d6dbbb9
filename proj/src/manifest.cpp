#include "fsdm/manifest.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fsdm/errors.hpp"

namespace fsdm::data {

namespace {

constexpr int kManifestVersion = 1;

nlohmann::json parse_line(const std::string& line, const std::string& path, int line_no) {
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
        throw IoError("load_manifest: " + path + ":" + std::to_string(line_no) +
                      " is not valid JSON");
    }
    return j;
}

}  // namespace

std::string DatasetManifest::image_path(int index) const {
    const ImageRecord& rec = images.at(index);
    if (root.empty()) return rec.path;
    return (std::filesystem::path(root) / rec.path).string();
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_manifest: cannot open " + path);

    nlohmann::json header;
    header["version"] = manifest.version;
    header["seed"] = manifest.seed;
    header["config"] = manifest.config;
    nlohmann::json cats = nlohmann::json::array();
    for (const auto& c : manifest.categories) {
        cats.push_back({{"id", c.id}, {"name", c.name}});
    }
    header["categories"] = cats;
    out << header.dump() << "\n";

    for (const auto& rec : manifest.images) {
        nlohmann::json line;
        line["id"] = rec.id;
        line["path"] = rec.path;
        line["width"] = rec.width;
        line["height"] = rec.height;
        nlohmann::json boxes = nlohmann::json::array();
        for (const auto& b : rec.boxes) {
            boxes.push_back(
                {{"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"h", b.h}, {"cat", b.category_id}});
        }
        line["boxes"] = boxes;
        out << line.dump() << "\n";
    }
    if (!out) throw IoError("save_manifest: write to " + path + " failed");
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_manifest: cannot open " + path);

    std::string line;
    if (!std::getline(in, line)) throw IoError("load_manifest: " + path + " is empty");

    DatasetManifest m;
    m.root = std::filesystem::path(path).parent_path().string();
    try {
        nlohmann::json header = parse_line(line, path, 1);
        m.version = header.at("version").get<int>();
        if (m.version != kManifestVersion) {
            throw IoError("load_manifest: unsupported manifest version " +
                          std::to_string(m.version));
        }
        m.seed = header.at("seed").get<std::uint64_t>();
        m.config = header.at("config");
        int expected_id = 0;
        for (const auto& c : header.at("categories")) {
            CategoryDef def;
            def.id = c.at("id").get<int>();
            def.name = c.at("name").get<std::string>();
            if (def.id != expected_id++) {
                throw IoError("load_manifest: category ids must be dense from 0, got " +
                              std::to_string(def.id));
            }
            m.categories.push_back(std::move(def));
        }
        int line_no = 1;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            nlohmann::json j = parse_line(line, path, line_no);
            ImageRecord rec;
            rec.id = j.at("id").get<std::string>();
            rec.path = j.at("path").get<std::string>();
            rec.width = j.at("width").get<int>();
            rec.height = j.at("height").get<int>();
            for (const auto& b : j.at("boxes")) {
                BoxAnnotation box;
                box.cx = b.at("cx").get<double>();
                box.cy = b.at("cy").get<double>();
                box.w = b.at("w").get<double>();
                box.h = b.at("h").get<double>();
                box.category_id = b.at("cat").get<int>();
                if (box.category_id < 0 ||
                    box.category_id >= static_cast<int>(m.categories.size())) {
                    throw IoError("load_manifest: image " + rec.id +
                                  " references unknown category " +
                                  std::to_string(box.category_id));
                }
                rec.boxes.push_back(box);
            }
            m.images.push_back(std::move(rec));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_manifest: " + path + ": " + e.what());
    }
    return m;
}

}  // namespace fsdm::data
