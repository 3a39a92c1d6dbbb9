#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsdm/checkpoint.hpp"
#include "fsdm/dataset.hpp"
#include "fsdm/image.hpp"
#include "fsdm/loss.hpp"
#include "fsdm/model.hpp"

namespace fsdm::train {

struct TrainConfig {
    int steps = 3000;
    double lr = 1e-3;
    std::vector<double> decay_at{0.6, 0.9};  // fractions of the run
    double decay_factor = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch = 4;
    std::vector<int> scale_sizes{96, 128, 160};
    int scale_period = 10;
    loss::LossWeights weights;
    int checkpoint_every = 0;  // 0: a quarter of the run
    std::uint64_t seed = 1;
};

inline void validate(const TrainConfig& cfg) {
    if (cfg.steps < 0) throw UsageError("train: steps must be >= 0");
    if (!(cfg.lr > 0.0)) throw UsageError("train: lr must be positive");
    if (!(cfg.decay_factor > 0.0 && cfg.decay_factor <= 1.0)) {
        throw UsageError("train: decay_factor must lie in (0, 1]");
    }
    double prev = 0.0;
    for (double f : cfg.decay_at) {
        if (!(f > prev && f < 1.0)) {
            throw UsageError("train: decay_at must be strictly increasing fractions in (0, 1)");
        }
        prev = f;
    }
    if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) {
        throw UsageError("train: momentum must lie in [0, 1)");
    }
    if (cfg.weight_decay < 0.0) throw UsageError("train: weight_decay must be >= 0");
    if (cfg.batch < 1) throw UsageError("train: batch must be >= 1");
    if (cfg.scale_sizes.empty()) throw UsageError("train: scale_sizes must not be empty");
    for (int s : cfg.scale_sizes) {
        if (s < 32 || s % 32 != 0) {
            throw UsageError("train: scale sizes must be multiples of 32 and >= 32");
        }
    }
    if (cfg.scale_period < 1) throw UsageError("train: scale_period must be >= 1");
    if (cfg.weights.w_obj < 0.0 || cfg.weights.w_noobj < 0.0) {
        throw UsageError("train: loss weights must be >= 0");
    }
    if (cfg.checkpoint_every < 0) throw UsageError("train: checkpoint_every must be >= 0");
}

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
    return {{"steps", cfg.steps},
            {"lr", cfg.lr},
            {"decay_at", cfg.decay_at},
            {"decay_factor", cfg.decay_factor},
            {"momentum", cfg.momentum},
            {"weight_decay", cfg.weight_decay},
            {"batch", cfg.batch},
            {"scale_sizes", cfg.scale_sizes},
            {"scale_period", cfg.scale_period},
            {"w_obj", cfg.weights.w_obj},
            {"w_noobj", cfg.weights.w_noobj},
            {"checkpoint_every", cfg.checkpoint_every},
            {"seed", cfg.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig cfg = {}) {
    for (const auto& [key, value] : j.items()) {
        if (key == "steps") cfg.steps = value.get<int>();
        else if (key == "lr") cfg.lr = value.get<double>();
        else if (key == "decay_at") cfg.decay_at = value.get<std::vector<double>>();
        else if (key == "decay_factor") cfg.decay_factor = value.get<double>();
        else if (key == "momentum") cfg.momentum = value.get<double>();
        else if (key == "weight_decay") cfg.weight_decay = value.get<double>();
        else if (key == "batch") cfg.batch = value.get<int>();
        else if (key == "scale_sizes") cfg.scale_sizes = value.get<std::vector<int>>();
        else if (key == "scale_period") cfg.scale_period = value.get<int>();
        else if (key == "w_obj") cfg.weights.w_obj = value.get<double>();
        else if (key == "w_noobj") cfg.weights.w_noobj = value.get<double>();
        else if (key == "checkpoint_every") cfg.checkpoint_every = value.get<int>();
        else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
        else throw UsageError("train config: unknown key '" + key + "'");
    }
    validate(cfg);
    return cfg;
}

// Step lr: the base rate decays by decay_factor once the step passes each
// decay_at fraction of the run.
inline double lr_at(const TrainConfig& cfg, int step) {
    double lr = cfg.lr;
    for (double f : cfg.decay_at) {
        if (step >= static_cast<int>(f * cfg.steps)) lr *= cfg.decay_factor;
    }
    return lr;
}

// Query size for a step. Sizes come from seeded shuffled bags over the size
// list, advancing every scale_period steps, so each size appears equally
// often in any full bag while the order stays deterministic per seed.
inline int scale_at(const TrainConfig& cfg, int step) {
    const int n = static_cast<int>(cfg.scale_sizes.size());
    if (n == 1) return cfg.scale_sizes[0];
    const int block = step / cfg.scale_period;
    const std::uint64_t bag = static_cast<std::uint64_t>(block / n);
    std::vector<int> order = cfg.scale_sizes;
    Rng rng(derive_seed(derive_seed(cfg.seed, 0x7363616cULL), bag));
    rng.shuffle_seq(order.begin(), order.end());
    return order[block % n];
}

inline int default_finetune_steps(int base_steps) { return std::max(1, base_steps / 10); }

struct StepMetrics {
    int step = 0;
    std::string stage;
    double loc = 0, obj = 0, noobj = 0, cls = 0, total = 0;
    double lr = 0;
    int img_size = 0;
};

// Append-only JSONL log, one line per optimizer step.
class MetricsLog {
   public:
    MetricsLog() = default;

    void open(const std::string& path) {
        out_.open(path, std::ios::app);
        if (!out_) throw IoError("metrics: cannot open " + path);
    }

    void append(const StepMetrics& m) {
        if (!out_.is_open()) return;
        nlohmann::json j{{"step", m.step},   {"stage", m.stage}, {"loc", m.loc},
                         {"obj", m.obj},     {"noobj", m.noobj}, {"cls", m.cls},
                         {"total", m.total}, {"lr", m.lr},       {"img_size", m.img_size}};
        out_ << j.dump() << '\n';
        out_.flush();
        if (!out_) throw IoError("metrics: write failed");
    }

   private:
    std::ofstream out_;
};

// Builds the full loss graph for one episode with the query resized to
// `size`; anchors rescale with it.
inline loss::LossBreakdown<float> episode_loss(const model::Detector<float>& det,
                                               const data::Episode& episode, int size,
                                               const std::vector<int>& active_categories,
                                               loss::LossWeights weights) {
    data::ImageSample q = episode.query.height() == size && episode.query.width() == size
                              ? episode.query
                              : data::resize_sample(episode.query, size, size);
    Tensor<float> img = reshape(q.image, {1, 3, size, size});
    auto feats = det.extract_meta_features(img);
    auto vecs = det.reweighting_vectors(data::stack_supports(episode.supports));
    auto raw = det.predict_raw(feats, vecs);
    const loss::AnchorSet anchors = det.anchors_for(size);
    const loss::MatchResult match = loss::match_anchors(q.boxes, anchors, size);
    return loss::total_loss(raw, q.boxes, active_categories, match, anchors, weights);
}

struct TrainPaths {
    std::string checkpoint_dir;  // empty: checkpoints disabled
    std::string metrics_path;    // empty: logging disabled
};

struct TrainResult {
    int steps_done = 0;
    bool diverged = false;
    std::string final_checkpoint;
    std::string salvage_checkpoint;  // last periodic checkpoint before divergence
    double first_loss = 0.0;
    double last_loss = 0.0;
};

using EpisodeSampler = std::function<data::Episode(Rng&)>;
using StepCallback = std::function<void(const StepMetrics&)>;

// Shared optimizer loop. Episodes are sampled with a seeded rng, batch losses
// are averaged into one graph, and a non-finite value anywhere aborts the run
// with the last periodic checkpoint as salvage.
inline TrainResult run_training(model::Detector<float>& det, const model::ModelConfig& save_cfg,
                                const std::string& stage, const EpisodeSampler& next_episode,
                                const std::vector<int>& active_categories, const TrainConfig& cfg,
                                const TrainPaths& paths, const StepCallback& on_step = {}) {
    validate(cfg);
    if (!paths.checkpoint_dir.empty()) {
        std::filesystem::create_directories(paths.checkpoint_dir);
    }
    MetricsLog log;
    if (!paths.metrics_path.empty()) {
        const auto parent = std::filesystem::path(paths.metrics_path).parent_path();
        if (!parent.empty()) std::filesystem::create_directories(parent);
        log.open(paths.metrics_path);
    }

    Rng rng(derive_seed(cfg.seed, 0x747261696eULL));
    SgdState<float> sgd;
    std::vector<Parameter<float>> trainable = det.trainable_parameters();
    const int ckpt_every = cfg.checkpoint_every > 0 ? cfg.checkpoint_every
                                                    : std::max(1, cfg.steps / 4);
    TrainResult res;
    for (int step = 0; step < cfg.steps; ++step) {
        const int size = scale_at(cfg, step);
        const double lr = lr_at(cfg, step);
        try {
            StepMetrics m;
            std::vector<Tensor<float>> totals;
            for (int b = 0; b < cfg.batch; ++b) {
                data::Episode ep = next_episode(rng);
                auto lb = episode_loss(det, ep, size, active_categories, cfg.weights);
                m.loc += lb.loc.item();
                m.obj += lb.obj.item();
                m.noobj += lb.noobj.item();
                m.cls += lb.cls.item();
                totals.push_back(lb.total);
            }
            Tensor<float> batch_total = totals.front();
            for (std::size_t i = 1; i < totals.size(); ++i) {
                batch_total = add(batch_total, totals[i]);
            }
            batch_total = mul_scalar(batch_total, 1.0f / static_cast<float>(cfg.batch));
            Gradients<float> grads = backward(batch_total);
            sgd_step(trainable, grads, sgd, static_cast<float>(lr),
                     static_cast<float>(cfg.momentum), static_cast<float>(cfg.weight_decay));

            m.step = step;
            m.stage = stage;
            m.loc /= cfg.batch;
            m.obj /= cfg.batch;
            m.noobj /= cfg.batch;
            m.cls /= cfg.batch;
            m.total = batch_total.item();
            m.lr = lr;
            m.img_size = size;
            log.append(m);
            if (on_step) on_step(m);
            if (step == 0) res.first_loss = m.total;
            res.last_loss = m.total;
            res.steps_done = step + 1;

            if (!paths.checkpoint_dir.empty() && (step + 1) % ckpt_every == 0) {
                const std::string latest = paths.checkpoint_dir + "/" + stage + "_latest.fsdm";
                save_checkpoint(latest, det, save_cfg, stage,
                                static_cast<std::uint64_t>(step + 1), rng.state());
                res.salvage_checkpoint = latest;
            }
        } catch (const NumericError&) {
            res.diverged = true;
            return res;
        }
    }
    if (!paths.checkpoint_dir.empty()) {
        res.final_checkpoint = paths.checkpoint_dir + "/" + stage + "_final.fsdm";
        save_checkpoint(res.final_checkpoint, det, save_cfg, stage,
                        static_cast<std::uint64_t>(cfg.steps), rng.state());
    }
    return res;
}

// Base stage: queries drawn uniformly from base_train, supports re-drawn per
// episode from whole base images.
inline TrainResult train_base(const data::ImageStore& store, const data::Pools& pools,
                              model::Detector<float>& det, const TrainConfig& cfg,
                              const TrainPaths& paths, const StepCallback& on_step = {}) {
    if (pools.base_train.empty()) throw UsageError("train_base: base training pool is empty");
    const std::vector<int>& active = pools.spec.base_categories;
    const int rw = det.config().rw_input;
    auto sampler = [&store, &pools, &active, rw](Rng& rng) {
        const int n = static_cast<int>(pools.base_train.size());
        const int query = pools.base_train[static_cast<std::size_t>(rng.uniform_int(0, n - 1))];
        return data::build_base_episode(store, pools, active, query, rw, rng);
    };
    model::ModelConfig save_cfg = det.config();
    save_cfg.num_categories = static_cast<int>(active.size());
    return run_training(det, save_cfg, "base", sampler, active, cfg, paths, on_step);
}

// Finetune stage: backbone stem and first three stages frozen, categories
// base + novel, supervision restricted to the k-shot tuning set.
inline TrainResult finetune_novel(const data::ImageStore& store, const data::Pools& pools,
                                  model::Detector<float>& det, const TrainConfig& cfg,
                                  const TrainPaths& paths, const StepCallback& on_step = {}) {
    std::vector<int> active = pools.spec.base_categories;
    active.insert(active.end(), pools.spec.novel_categories.begin(),
                  pools.spec.novel_categories.end());
    std::sort(active.begin(), active.end());
    const std::vector<data::TuningItem> items = data::finetune_tuning_set(store.manifest(), pools);
    if (items.empty()) throw CapacityError("finetune: tuning set is empty");
    const int rw = det.config().rw_input;
    auto sampler = [&store, &pools, &active, &items, rw](Rng& rng) {
        const int n = static_cast<int>(items.size());
        const data::TuningItem& item = items[static_cast<std::size_t>(rng.uniform_int(0, n - 1))];
        return data::build_finetune_episode(store, pools, active, item, rw, rng);
    };
    model::ModelConfig save_cfg = det.config();
    save_cfg.num_categories = static_cast<int>(active.size());
    save_cfg.k_shot = pools.spec.k_shot;
    det.set_finetune_mode(true);
    TrainResult res = run_training(det, save_cfg, "finetune", sampler, active, cfg, paths, on_step);
    det.set_finetune_mode(false);
    return res;
}

}  // namespace fsdm::train
