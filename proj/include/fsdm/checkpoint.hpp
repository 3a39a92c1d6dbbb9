#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fsdm/model.hpp"

namespace fsdm::train {

// On-disk layout: magic "FSDM", u32 format version, length-prefixed canonical
// ModelConfig JSON, length-prefixed stage string, u64 step, length-prefixed
// rng state, then length-prefixed (name, shape, raw little-endian f32) records.
struct ParamBlob {
    std::string name;
    std::vector<int> dims;
    std::vector<float> values;
};

struct CheckpointData {
    nlohmann::json config_json;
    std::string stage;
    std::uint64_t step = 0;
    std::string rng_state;
    std::vector<ParamBlob> params;
};

void write_checkpoint_file(const std::string& path, const CheckpointData& data);
CheckpointData read_checkpoint_file(const std::string& path);

template <class T>
void save_checkpoint(const std::string& path, const model::Detector<T>& det,
                     const model::ModelConfig& config, const std::string& stage,
                     std::uint64_t step, const std::string& rng_state) {
    CheckpointData data;
    data.config_json = model::model_config_to_json(config);
    data.stage = stage;
    data.step = step;
    data.rng_state = rng_state;
    for (const auto& p : det.parameters()) {
        ParamBlob blob;
        blob.name = p.name;
        blob.dims = p.tensor.shape();
        blob.values.reserve(static_cast<std::size_t>(p.tensor.numel()));
        for (T v : p.tensor.values()) blob.values.push_back(static_cast<float>(v));
        data.params.push_back(std::move(blob));
    }
    write_checkpoint_file(path, data);
}

// Overwrites the detector's parameters with the stored blobs; every parameter
// must be present with a matching shape.
template <class T>
void load_into(model::Detector<T>& det, const CheckpointData& data) {
    if (det.parameters().size() != data.params.size()) {
        throw DimensionError("checkpoint: stores " + std::to_string(data.params.size()) +
                             " parameters, model has " +
                             std::to_string(det.parameters().size()));
    }
    for (std::size_t i = 0; i < data.params.size(); ++i) {
        auto& p = det.parameters()[i];
        const ParamBlob& blob = data.params[i];
        if (p.name != blob.name) {
            throw DimensionError("checkpoint: parameter " + std::to_string(i) + " is '" +
                                 blob.name + "', model expects '" + p.name + "'");
        }
        if (p.tensor.shape() != blob.dims) {
            throw DimensionError("checkpoint: " + blob.name + " has shape " +
                                 shape_str(blob.dims) + ", model expects " +
                                 shape_str(p.tensor.shape()));
        }
        T* dst = p.tensor.mutable_data();
        for (std::size_t j = 0; j < blob.values.size(); ++j) dst[j] = static_cast<T>(blob.values[j]);
    }
}

struct CheckpointMeta {
    model::ModelConfig config;
    std::string stage;
    std::uint64_t step = 0;
    std::string rng_state;
};

// Rebuilds a detector from the stored config and fills its parameters.
template <class T>
std::unique_ptr<model::Detector<T>> load_detector(const std::string& path,
                                                  CheckpointMeta* meta = nullptr) {
    CheckpointData data = read_checkpoint_file(path);
    model::ModelConfig cfg = model::model_config_from_json(data.config_json);
    auto det = std::make_unique<model::Detector<T>>(cfg);
    load_into(*det, data);
    if (meta) {
        meta->config = cfg;
        meta->stage = data.stage;
        meta->step = data.step;
        meta->rng_state = data.rng_state;
    }
    return det;
}

}  // namespace fsdm::train
