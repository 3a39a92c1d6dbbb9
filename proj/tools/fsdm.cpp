// Command-line front end: dataset synthesis, two-stage training, evaluation,
// and report export. Exit codes: 0 success, 2 usage/input error, 3 numeric
// failure. Flag values override config-file sections, which override
// built-in defaults; FSDM_SEED overrides only the default seed.
#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "fsdm/checkpoint.hpp"
#include "fsdm/dataset.hpp"
#include "fsdm/errors.hpp"
#include "fsdm/eval.hpp"
#include "fsdm/image.hpp"
#include "fsdm/manifest.hpp"
#include "fsdm/model.hpp"
#include "fsdm/png_io.hpp"
#include "fsdm/shapeworld.hpp"
#include "fsdm/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using namespace fsdm;

std::uint64_t env_default_seed() {
    const char* env = std::getenv("FSDM_SEED");
    if (env == nullptr || *env == '\0') return 1;
    const std::string s(env);
    if (s.find_first_not_of("0123456789") != std::string::npos) {
        throw UsageError("FSDM_SEED must be a non-negative integer, got '" + s + "'");
    }
    try {
        return static_cast<std::uint64_t>(std::stoull(s));
    } catch (const std::exception&) {
        throw UsageError("FSDM_SEED out of range: '" + s + "'");
    }
}

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw UsageError("config: " + path + ": " + std::string(e.what()));
    }
    if (!j.is_object()) throw UsageError("config: " + path + " must hold a JSON object");
    static const std::set<std::string> kSections{"gen", "train", "model", "split", "eval", "shots"};
    for (const auto& [key, value] : j.items()) {
        if (kSections.count(key) == 0) {
            throw UsageError("config: unknown section '" + key + "' in " + path);
        }
        if (!value.is_object()) {
            throw UsageError("config: section '" + key + "' must be an object");
        }
    }
    return j;
}

json section(const json& cfg, const char* name) {
    return cfg.contains(name) ? cfg.at(name) : json::object();
}

struct OutLayout {
    fs::path ckpt, logs, reports;
};

OutLayout prepare_out(const std::string& out) {
    OutLayout d{fs::path(out) / "ckpt", fs::path(out) / "logs", fs::path(out) / "reports"};
    std::error_code ec;
    for (const fs::path* p : {&d.ckpt, &d.logs, &d.reports}) {
        fs::create_directories(*p, ec);
        if (ec) throw IoError("cannot create " + p->string() + ": " + ec.message());
    }
    return d;
}

void write_json_file(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string());
    out << j.dump(2) << '\n';
    out.flush();
    if (!out) throw IoError("write failed: " + path.string());
}

data::DatasetManifest load_dataset(const std::string& data_dir) {
    return data::load_manifest((fs::path(data_dir) / "manifest.jsonl").string());
}

json split_to_json(const data::SplitSpec& spec) {
    return {{"base", spec.base_categories},
            {"novel", spec.novel_categories},
            {"k_shot", spec.k_shot}};
}

std::map<int, std::string> category_names(const data::DatasetManifest& manifest) {
    std::map<int, std::string> names;
    for (const auto& cat : manifest.categories) names[cat.id] = cat.name;
    return names;
}

// Category split shared by the training and evaluation commands. An empty
// base list means every manifest category not marked novel.
struct SplitOpts {
    std::vector<int> base, novel;
    int k_shot = 5;
    CLI::Option* base_opt = nullptr;
    CLI::Option* novel_opt = nullptr;
    CLI::Option* k_opt = nullptr;

    void attach(CLI::App* cmd, bool with_k = true) {
        base_opt = cmd->add_option("--base-cats", base,
                                   "Base category ids (default: all not marked novel)")
                       ->delimiter(',');
        novel_opt = cmd->add_option("--novel-cats", novel, "Novel category ids")->delimiter(',');
        if (with_k) k_opt = cmd->add_option("--k-shot", k_shot, "Support instances per category");
    }

    bool k_explicit(const json& sect) const {
        return (k_opt != nullptr && k_opt->count() > 0) || sect.contains("k_shot");
    }

    data::SplitSpec resolve(const data::DatasetManifest& manifest, const json& sect) const {
        data::SplitSpec spec;
        spec.k_shot = 5;
        for (const auto& [key, value] : sect.items()) {
            if (key == "base") spec.base_categories = value.get<std::vector<int>>();
            else if (key == "novel") spec.novel_categories = value.get<std::vector<int>>();
            else if (key == "k_shot") spec.k_shot = value.get<int>();
            else throw UsageError("split config: unknown key '" + key + "'");
        }
        if (base_opt->count() > 0) spec.base_categories = base;
        if (novel_opt->count() > 0) spec.novel_categories = novel;
        if (k_opt != nullptr && k_opt->count() > 0) spec.k_shot = k_shot;
        if (spec.base_categories.empty()) {
            const std::set<int> nov(spec.novel_categories.begin(), spec.novel_categories.end());
            for (const auto& cat : manifest.categories) {
                if (nov.count(cat.id) == 0) spec.base_categories.push_back(cat.id);
            }
        }
        return spec;
    }
};

struct TrainOpts {
    int steps = 0, epochs = 0, batch = 0, scale_period = 0, checkpoint_every = 0;
    double lr = 0, decay_factor = 0, momentum = 0, weight_decay = 0;
    std::vector<double> decay_at;
    std::vector<int> scale_sizes;
    std::uint64_t seed = 0;
    CLI::Option *steps_opt{}, *epochs_opt{}, *batch_opt{}, *period_opt{}, *ckpt_opt{};
    CLI::Option *lr_opt{}, *factor_opt{}, *momentum_opt{}, *wd_opt{};
    CLI::Option *decay_opt{}, *sizes_opt{}, *seed_opt{};

    void attach(CLI::App* cmd) {
        steps_opt = cmd->add_option("--steps", steps, "Optimizer steps");
        epochs_opt = cmd->add_option("--epochs", epochs,
                                     "Passes over the training pool (alternative to --steps)")
                         ->excludes(steps_opt);
        lr_opt = cmd->add_option("--lr", lr, "Initial learning rate");
        decay_opt = cmd->add_option("--decay-at", decay_at,
                                    "Decay points as fractions of the run")
                        ->delimiter(',');
        factor_opt = cmd->add_option("--decay-factor", decay_factor,
                                     "Learning-rate multiplier at each decay point");
        momentum_opt = cmd->add_option("--momentum", momentum, "SGD momentum");
        wd_opt = cmd->add_option("--weight-decay", weight_decay, "L2 penalty");
        batch_opt = cmd->add_option("--batch", batch, "Episodes per step");
        sizes_opt = cmd->add_option("--scale-sizes", scale_sizes, "Training image sizes")
                        ->delimiter(',');
        period_opt = cmd->add_option("--scale-period", scale_period, "Steps between size switches");
        ckpt_opt = cmd->add_option("--checkpoint-every", checkpoint_every,
                                   "Steps between periodic checkpoints (0: quarter of the run)");
        seed_opt = cmd->add_option("--seed", seed, "Master seed (FSDM_SEED overrides the default)");
    }

    json overlay() const {
        json j = json::object();
        if (steps_opt->count()) j["steps"] = steps;
        if (lr_opt->count()) j["lr"] = lr;
        if (decay_opt->count()) j["decay_at"] = decay_at;
        if (factor_opt->count()) j["decay_factor"] = decay_factor;
        if (momentum_opt->count()) j["momentum"] = momentum;
        if (wd_opt->count()) j["weight_decay"] = weight_decay;
        if (batch_opt->count()) j["batch"] = batch;
        if (sizes_opt->count()) j["scale_sizes"] = scale_sizes;
        if (period_opt->count()) j["scale_period"] = scale_period;
        if (ckpt_opt->count()) j["checkpoint_every"] = checkpoint_every;
        if (seed_opt->count()) j["seed"] = seed;
        return j;
    }

    // default_steps 0 keeps the built-in step count; pool_size drives the
    // epoch-to-step conversion.
    train::TrainConfig resolve(const json& sect, int default_steps, int pool_size) const {
        json merged = sect;
        const json flags = overlay();
        for (const auto& [key, value] : flags.items()) merged[key] = value;
        if (!merged.contains("seed")) merged["seed"] = env_default_seed();
        train::TrainConfig tc = train::train_config_from_json(merged);
        if (epochs_opt->count() > 0) {
            if (epochs < 1) throw UsageError("--epochs must be >= 1");
            if (pool_size < 1) throw UsageError("--epochs is not available for this command");
            tc.steps = epochs * ((pool_size + tc.batch - 1) / tc.batch);
        } else if (!merged.contains("steps") && default_steps > 0) {
            tc.steps = default_steps;
        }
        train::validate(tc);
        return tc;
    }
};

struct ModelOpts {
    double width_scale = 0;
    int rw_input = 0, anchor_size = 0;
    CLI::Option *ws_opt{}, *rw_opt{}, *as_opt{};

    void attach(CLI::App* cmd) {
        ws_opt = cmd->add_option("--width-scale", width_scale,
                                 "Channel fraction of the full-width trunk");
        rw_opt = cmd->add_option("--rw-input", rw_input, "Reweighting input resolution");
        as_opt = cmd->add_option("--anchor-size", anchor_size,
                                 "Reference image size for the anchor shapes");
    }

    model::ModelConfig resolve(const json& sect, int num_categories, std::uint64_t seed) const {
        json merged = sect;
        if (ws_opt->count()) merged["width_scale"] = width_scale;
        if (rw_opt->count()) merged["rw_input"] = rw_input;
        if (as_opt->count()) merged["anchor_image_size"] = anchor_size;
        merged["num_categories"] = num_categories;
        if (!merged.contains("seed")) merged["seed"] = seed;
        model::ModelConfig mc = model::model_config_from_json(merged);
        model::validate(mc);
        return mc;
    }
};

json eval_config_to_json(const eval::EvalConfig& ec) {
    return {{"conf", ec.conf},
            {"nms_iou", ec.nms_iou},
            {"match_iou", ec.match_iou},
            {"threads", ec.threads}};
}

struct EvalOpts {
    double conf = 0, nms_iou = 0, match_iou = 0;
    int threads = 0;
    CLI::Option *conf_opt{}, *nms_opt{}, *match_opt{}, *threads_opt{};

    void attach(CLI::App* cmd) {
        conf_opt = cmd->add_option("--conf", conf, "Score threshold for the recall sweep");
        nms_opt = cmd->add_option("--nms-iou", nms_iou, "Suppression overlap");
        match_opt = cmd->add_option("--match-iou", match_iou, "True-positive overlap");
        threads_opt = cmd->add_option("--threads", threads,
                                      "Worker threads (1 is the deterministic reference)");
    }

    eval::EvalConfig resolve(const json& sect) const {
        eval::EvalConfig ec;
        for (const auto& [key, value] : sect.items()) {
            if (key == "conf") ec.conf = value.get<double>();
            else if (key == "nms_iou") ec.nms_iou = value.get<double>();
            else if (key == "match_iou") ec.match_iou = value.get<double>();
            else if (key == "threads") ec.threads = value.get<int>();
            else throw UsageError("eval config: unknown key '" + key + "'");
        }
        if (conf_opt->count()) ec.conf = conf;
        if (nms_opt->count()) ec.nms_iou = nms_iou;
        if (match_opt->count()) ec.match_iou = match_iou;
        if (threads_opt->count()) ec.threads = threads;
        eval::validate(ec);
        return ec;
    }
};

// Evaluation pool for one side of the split; "all" merges both sides.
struct SplitPools {
    std::vector<int> categories;
    std::vector<int> images;
    std::map<int, std::vector<data::SupportRef>> refs;
};

SplitPools split_pools(const data::Pools& pools, const std::string& which) {
    SplitPools sp;
    if (which == "base") {
        sp.categories = pools.spec.base_categories;
        sp.images = pools.base_eval;
        sp.refs = pools.base_support;
    } else if (which == "novel") {
        if (pools.spec.novel_categories.empty()) {
            throw UsageError("split 'novel' requires --novel-cats");
        }
        sp.categories = pools.spec.novel_categories;
        sp.images = pools.novel_eval;
        sp.refs = pools.novel_support;
    } else {
        sp.categories = pools.spec.base_categories;
        sp.categories.insert(sp.categories.end(), pools.spec.novel_categories.begin(),
                             pools.spec.novel_categories.end());
        sp.images = pools.base_eval;
        sp.images.insert(sp.images.end(), pools.novel_eval.begin(), pools.novel_eval.end());
        std::sort(sp.images.begin(), sp.images.end());
        sp.images.erase(std::unique(sp.images.begin(), sp.images.end()), sp.images.end());
        sp.refs = pools.base_support;
        for (const auto& [cat, refs] : pools.novel_support) sp.refs[cat] = refs;
    }
    return sp;
}

// Whole-image supports: for each category, the first max_per_cat images that
// contain it, masked to all of its boxes.
std::map<int, std::vector<data::SupportRef>> whole_image_refs(
    const data::DatasetManifest& manifest, const std::vector<int>& cats, int max_per_cat) {
    if (max_per_cat < 1) throw UsageError("--max-per-cat must be >= 1");
    std::map<int, std::vector<data::SupportRef>> refs;
    for (int cat : cats) refs[cat] = {};
    for (int i = 0; i < static_cast<int>(manifest.images.size()); ++i) {
        const data::ImageRecord& rec = manifest.images[static_cast<std::size_t>(i)];
        for (auto& [cat, list] : refs) {
            if (static_cast<int>(list.size()) >= max_per_cat) continue;
            data::SupportRef ref;
            ref.image_index = i;
            for (int b = 0; b < static_cast<int>(rec.boxes.size()); ++b) {
                if (rec.boxes[static_cast<std::size_t>(b)].category_id == cat) {
                    ref.box_indices.push_back(b);
                }
            }
            if (!ref.box_indices.empty()) list.push_back(std::move(ref));
        }
    }
    for (const auto& [cat, list] : refs) {
        if (list.empty()) {
            throw UsageError("no images contain category " + std::to_string(cat));
        }
    }
    return refs;
}

train::StepCallback progress_printer(const std::string& stage, int total_steps) {
    const int every = std::max(1, total_steps / 20);
    return [stage, total_steps, every](const train::StepMetrics& m) {
        const int shown = m.step + 1;
        if (shown % every == 0 || shown == total_steps || shown == 1) {
            std::cout << stage << " step " << shown << "/" << total_steps << "  total " << m.total
                      << "  loc " << m.loc << "  obj " << m.obj << "  noobj " << m.noobj
                      << "  cls " << m.cls << "  lr " << m.lr << "  size " << m.img_size << "\n";
        }
    };
}

json train_result_to_json(const train::TrainResult& res) {
    return {{"steps_done", res.steps_done},
            {"diverged", res.diverged},
            {"first_loss", res.first_loss},
            {"last_loss", res.last_loss},
            {"final_checkpoint", res.final_checkpoint},
            {"salvage_checkpoint", res.salvage_checkpoint}};
}

int finish_training(const std::string& stage, const train::TrainResult& res,
                    const fs::path& result_path) {
    write_json_file(result_path, train_result_to_json(res));
    if (res.diverged) {
        std::cerr << stage << ": diverged at step " << res.steps_done;
        if (!res.salvage_checkpoint.empty()) {
            std::cerr << "; salvage checkpoint: " << res.salvage_checkpoint;
        }
        std::cerr << "\n";
        return 3;
    }
    std::cout << stage << ": " << res.steps_done << " steps, loss " << res.first_loss << " -> "
              << res.last_loss << "\n"
              << "checkpoint: " << res.final_checkpoint << "\n";
    return 0;
}

struct GenCmd {
    std::string out, config_path;
    int images = 0, size = 0, min_objects = 0, max_objects = 0;
    double min_side = 0, max_side = 0, noise = 0;
    std::vector<std::string> categories;
    std::uint64_t seed = 0;
    CLI::App* cmd = nullptr;
    CLI::Option *images_opt{}, *size_opt{}, *min_obj_opt{}, *max_obj_opt{};
    CLI::Option *min_side_opt{}, *max_side_opt{}, *noise_opt{}, *cats_opt{}, *seed_opt{};

    void attach(CLI::App& app) {
        cmd = app.add_subcommand("gen-data", "Render a synthetic shape dataset with box labels");
        cmd->add_option("--out", out, "Dataset directory")->required();
        cmd->add_option("--config", config_path, "JSON config file");
        images_opt = cmd->add_option("--images", images, "Number of images");
        size_opt = cmd->add_option("--size", size, "Image side in pixels");
        min_obj_opt = cmd->add_option("--min-objects", min_objects, "Minimum objects per image");
        max_obj_opt = cmd->add_option("--max-objects", max_objects, "Maximum objects per image");
        min_side_opt = cmd->add_option("--min-side", min_side, "Minimum box side in pixels");
        max_side_opt = cmd->add_option("--max-side", max_side, "Maximum box side in pixels");
        noise_opt = cmd->add_option("--noise", noise, "Additive noise level");
        cats_opt = cmd->add_option("--categories", categories, "Category names")->delimiter(',');
        seed_opt = cmd->add_option("--seed", seed, "Master seed (FSDM_SEED overrides the default)");
    }

    int run() const {
        const json cfg = load_config_file(config_path);
        json merged = section(cfg, "gen");
        if (images_opt->count()) merged["num_images"] = images;
        if (size_opt->count()) merged["image_size"] = size;
        if (min_obj_opt->count()) merged["min_objects"] = min_objects;
        if (max_obj_opt->count()) merged["max_objects"] = max_objects;
        if (min_side_opt->count()) merged["min_side"] = min_side;
        if (max_side_opt->count()) merged["max_side"] = max_side;
        if (noise_opt->count()) merged["noise_level"] = noise;
        if (cats_opt->count()) merged["categories"] = categories;
        if (seed_opt->count()) merged["seed"] = seed;
        else if (!merged.contains("seed")) merged["seed"] = env_default_seed();
        const data::GenConfig gen = data::gen_config_from_json(merged);
        const data::DatasetManifest manifest = data::generate_shapeworld(gen, out);
        std::cout << "gen-data: wrote " << manifest.images.size() << " images and "
                  << manifest.categories.size() << " categories to " << out << "\n";
        return 0;
    }
};

struct TrainBaseCmd {
    std::string data_dir, out, config_path;
    SplitOpts split;
    TrainOpts train_opts;
    ModelOpts model_opts;
    CLI::App* cmd = nullptr;

    void attach(CLI::App& app) {
        cmd = app.add_subcommand("train-base", "Train the detector on the base categories");
        cmd->add_option("--data", data_dir, "Dataset directory (holds manifest.jsonl)")->required();
        cmd->add_option("--out", out, "Run directory")->required();
        cmd->add_option("--config", config_path, "JSON config file");
        split.attach(cmd);
        train_opts.attach(cmd);
        model_opts.attach(cmd);
    }

    int run() const {
        const json cfg = load_config_file(config_path);
        const data::DatasetManifest manifest = load_dataset(data_dir);
        const data::SplitSpec spec = split.resolve(manifest, section(cfg, "split"));
        const data::Pools pools = data::split_base_novel(manifest, spec);
        const train::TrainConfig tc = train_opts.resolve(
            section(cfg, "train"), 0, static_cast<int>(pools.base_train.size()));
        const model::ModelConfig mc = model_opts.resolve(
            section(cfg, "model"), static_cast<int>(spec.base_categories.size()), tc.seed);
        const OutLayout dirs = prepare_out(out);

        write_json_file(dirs.reports / "train_base_config.json",
                        {{"command", "train-base"},
                         {"data", data_dir},
                         {"split", split_to_json(spec)},
                         {"model", model::model_config_to_json(mc)},
                         {"train", train::train_config_to_json(tc)}});

        const data::ImageStore store(manifest);
        model::Detector<float> det(mc);
        const fs::path metrics = dirs.logs / "base_metrics.jsonl";
        fs::remove(metrics);
        const train::TrainPaths paths{dirs.ckpt.string(), metrics.string()};
        const train::TrainResult res =
            train::train_base(store, pools, det, tc, paths, progress_printer("base", tc.steps));
        return finish_training("train-base", res, dirs.reports / "train_base_result.json");
    }
};

struct FinetuneCmd {
    std::string data_dir, base_ckpt, out, config_path;
    int shots = 5;
    SplitOpts split;
    TrainOpts train_opts;
    CLI::App* cmd = nullptr;
    CLI::Option* shots_opt = nullptr;

    void attach(CLI::App& app) {
        cmd = app.add_subcommand("finetune",
                                 "Adapt a base checkpoint to novel categories from k shots");
        cmd->add_option("--data", data_dir, "Dataset directory (holds manifest.jsonl)")->required();
        cmd->add_option("--base", base_ckpt, "Base checkpoint")->required();
        cmd->add_option("--out", out, "Run directory")->required();
        cmd->add_option("--config", config_path, "JSON config file");
        shots_opt = cmd->add_option("--shots", shots, "Support instances per category");
        split.attach(cmd, false);
        train_opts.attach(cmd);
    }

    int run() const {
        const json cfg = load_config_file(config_path);
        const data::DatasetManifest manifest = load_dataset(data_dir);
        data::SplitSpec spec = split.resolve(manifest, section(cfg, "split"));
        if (shots_opt->count() > 0) spec.k_shot = shots;
        if (spec.novel_categories.empty()) throw UsageError("finetune: --novel-cats is required");

        train::CheckpointMeta meta;
        std::unique_ptr<model::Detector<float>> det = train::load_detector<float>(base_ckpt, &meta);
        if (static_cast<int>(spec.base_categories.size()) != meta.config.num_categories) {
            throw UsageError("finetune: checkpoint holds " +
                             std::to_string(meta.config.num_categories) +
                             " categories but the split lists " +
                             std::to_string(spec.base_categories.size()) + " base categories");
        }
        const data::Pools pools = data::split_base_novel(manifest, spec);
        const int tuning_items =
            static_cast<int>(data::finetune_tuning_set(manifest, pools).size());
        const train::TrainConfig tc =
            train_opts.resolve(section(cfg, "train"),
                               train::default_finetune_steps(static_cast<int>(meta.step)),
                               std::max(1, tuning_items));
        const OutLayout dirs = prepare_out(out);

        write_json_file(dirs.reports / "finetune_config.json",
                        {{"command", "finetune"},
                         {"data", data_dir},
                         {"base", base_ckpt},
                         {"split", split_to_json(spec)},
                         {"model", model::model_config_to_json(meta.config)},
                         {"train", train::train_config_to_json(tc)}});

        const data::ImageStore store(manifest);
        const fs::path metrics = dirs.logs / "finetune_metrics.jsonl";
        fs::remove(metrics);
        const train::TrainPaths paths{dirs.ckpt.string(), metrics.string()};
        const train::TrainResult res = train::finetune_novel(
            store, pools, *det, tc, paths, progress_printer("finetune", tc.steps));
        return finish_training("finetune", res, dirs.reports / "finetune_result.json");
    }
};

struct EvaluateCmd {
    std::string data_dir, ckpt, out, config_path, which = "base";
    SplitOpts split;
    EvalOpts eval_opts;
    CLI::App* cmd = nullptr;

    void attach(CLI::App& app) {
        cmd = app.add_subcommand("evaluate", "Score a checkpoint with 11-point average precision");
        cmd->add_option("--data", data_dir, "Dataset directory (holds manifest.jsonl)")->required();
        cmd->add_option("--ckpt", ckpt, "Checkpoint to score")->required();
        cmd->add_option("--out", out, "Run directory")->required();
        cmd->add_option("--config", config_path, "JSON config file");
        cmd->add_option("--split", which, "Evaluation pool")
            ->check(CLI::IsMember({"base", "novel", "all"}));
        split.attach(cmd);
        eval_opts.attach(cmd);
    }

    int run() const {
        const json cfg = load_config_file(config_path);
        const data::DatasetManifest manifest = load_dataset(data_dir);
        train::CheckpointMeta meta;
        const std::unique_ptr<model::Detector<float>> det =
            train::load_detector<float>(ckpt, &meta);
        data::SplitSpec spec = split.resolve(manifest, section(cfg, "split"));
        if (!split.k_explicit(section(cfg, "split")) && meta.config.k_shot > 0) {
            spec.k_shot = meta.config.k_shot;
        }
        const data::Pools pools = data::split_base_novel(manifest, spec);
        const SplitPools sp = split_pools(pools, which);
        const eval::EvalConfig ec = eval_opts.resolve(section(cfg, "eval"));
        const OutLayout dirs = prepare_out(out);

        const json echo{{"command", "evaluate"}, {"data", data_dir},
                        {"ckpt", ckpt},          {"split_name", which},
                        {"split", split_to_json(spec)}, {"eval", eval_config_to_json(ec)},
                        {"model", model::model_config_to_json(meta.config)}};
        const data::ImageStore store(manifest);
        const eval::EvalReport report =
            eval::evaluate(*det, store, sp.categories, sp.images, sp.refs, ec, echo);
        write_json_file(dirs.reports / ("eval_" + which + ".json"),
                        eval::eval_report_to_json(report));

        const std::map<int, std::string> names = category_names(manifest);
        std::cout << "evaluate[" << which << "]: " << report.images << " images\n";
        for (const auto& [id, ce] : report.per_category) {
            std::cout << "  cat " << id;
            if (auto it = names.find(id); it != names.end()) std::cout << " (" << it->second << ")";
            if (ce.gt > 0) std::cout << ": ap " << ce.ap;
            else std::cout << ": no ground truth";
            std::cout << "  gt " << ce.gt << "  tp " << ce.tp << "  fp " << ce.fp << "\n";
        }
        if (report.map_defined) std::cout << "mAP " << report.map << "\n";
        else std::cout << "mAP undefined (no ground truth)\n";
        return 0;
    }
};

struct ShotsCmd {
    std::string data_dir, base_ckpt, out, config_path;
    std::vector<int> list;
    int seeds = 0;
    SplitOpts split;
    TrainOpts train_opts;
    EvalOpts eval_opts;
    CLI::App* cmd = nullptr;
    CLI::Option *list_opt{}, *seeds_opt{};

    void attach(CLI::App& app) {
        cmd = app.add_subcommand("shots",
                                 "Sweep novel average precision over support counts");
        cmd->add_option("--data", data_dir, "Dataset directory (holds manifest.jsonl)")->required();
        cmd->add_option("--base", base_ckpt, "Base checkpoint")->required();
        cmd->add_option("--out", out, "Run directory")->required();
        cmd->add_option("--config", config_path, "JSON config file");
        list_opt = cmd->add_option("--list", list, "Shot counts to sweep")->delimiter(',');
        seeds_opt = cmd->add_option("--seeds", seeds, "Replicates per shot count");
        split.attach(cmd, false);
        train_opts.attach(cmd);
        eval_opts.attach(cmd);
    }

    int run() const {
        const json cfg = load_config_file(config_path);
        const data::DatasetManifest manifest = load_dataset(data_dir);
        const data::SplitSpec spec = split.resolve(manifest, section(cfg, "split"));
        if (spec.novel_categories.empty()) throw UsageError("shots: --novel-cats is required");
        const train::CheckpointData base = train::read_checkpoint_file(base_ckpt);

        eval::ShotsConfig sc;
        for (const auto& [key, value] : section(cfg, "shots").items()) {
            if (key == "list") sc.shot_list = value.get<std::vector<int>>();
            else if (key == "seeds") sc.seeds = value.get<int>();
            else throw UsageError("shots config: unknown key '" + key + "'");
        }
        if (list_opt->count()) sc.shot_list = list;
        if (seeds_opt->count()) sc.seeds = seeds;
        sc.finetune =
            train_opts.resolve(section(cfg, "train"),
                               train::default_finetune_steps(static_cast<int>(base.step)), 0);
        sc.eval = eval_opts.resolve(section(cfg, "eval"));
        const OutLayout dirs = prepare_out(out);

        write_json_file(dirs.reports / "shots_config.json",
                        {{"command", "shots"},
                         {"data", data_dir},
                         {"base", base_ckpt},
                         {"split", split_to_json(spec)},
                         {"shots", {{"list", sc.shot_list}, {"seeds", sc.seeds}}},
                         {"train", train::train_config_to_json(sc.finetune)},
                         {"eval", eval_config_to_json(sc.eval)}});

        const data::ImageStore store(manifest);
        const std::vector<eval::ShotsRow> rows = eval::shots_experiment(
            manifest, store, base_ckpt, spec.base_categories, spec.novel_categories, sc);
        eval::write_shots_csv(rows, (dirs.reports / "shots.csv").string());
        for (const auto& row : rows) {
            if (row.category == "mean") {
                std::cout << "shots " << row.shots << ": mean novel ap " << row.ap << "\n";
            }
        }
        std::cout << "wrote " << (dirs.reports / "shots.csv").string() << "\n";
        return 0;
    }
};

constexpr std::array<std::array<unsigned char, 3>, 8> kPalette{{{230, 70, 60},
                                                                {60, 160, 230},
                                                                {70, 200, 90},
                                                                {240, 200, 50},
                                                                {200, 90, 220},
                                                                {250, 140, 40},
                                                                {90, 220, 210},
                                                                {150, 150, 150}}};

struct DetectCmd {
    std::string data_dir, ckpt, out, config_path, which = "all";
    int images = 0;
    double conf = 0.25, nms_iou = 0.45;
    bool draw = false;
    SplitOpts split;
    CLI::App* cmd = nullptr;
    CLI::Option* images_opt = nullptr;

    void attach(CLI::App& app) {
        cmd = app.add_subcommand("detect", "Dump detections for a pool of images");
        cmd->add_option("--data", data_dir, "Dataset directory (holds manifest.jsonl)")->required();
        cmd->add_option("--ckpt", ckpt, "Checkpoint")->required();
        cmd->add_option("--out", out, "Run directory")->required();
        cmd->add_option("--config", config_path, "JSON config file");
        cmd->add_option("--split", which, "Image pool")
            ->check(CLI::IsMember({"base", "novel", "all"}));
        images_opt = cmd->add_option("--images", images, "First N images of the pool (0: all)");
        cmd->add_option("--conf", conf, "Score threshold");
        cmd->add_option("--nms-iou", nms_iou, "Suppression overlap");
        cmd->add_flag("--draw", draw, "Write annotated PNGs");
        split.attach(cmd);
    }

    int run() const {
        const json cfg = load_config_file(config_path);
        const data::DatasetManifest manifest = load_dataset(data_dir);
        train::CheckpointMeta meta;
        const std::unique_ptr<model::Detector<float>> det =
            train::load_detector<float>(ckpt, &meta);
        data::SplitSpec spec = split.resolve(manifest, section(cfg, "split"));
        if (!split.k_explicit(section(cfg, "split")) && meta.config.k_shot > 0) {
            spec.k_shot = meta.config.k_shot;
        }
        const data::Pools pools = data::split_base_novel(manifest, spec);
        SplitPools sp = split_pools(pools, which);
        if (images_opt->count() > 0) {
            if (images < 0) throw UsageError("detect: --images must be >= 0");
            if (images < static_cast<int>(sp.images.size())) {
                sp.images.resize(static_cast<std::size_t>(images));
            }
        }
        if (!(nms_iou > 0.0 && nms_iou < 1.0)) {
            throw UsageError("detect: nms_iou must lie in (0, 1)");
        }
        const OutLayout dirs = prepare_out(out);

        write_json_file(dirs.reports / "detect_config.json",
                        {{"command", "detect"},
                         {"data", data_dir},
                         {"ckpt", ckpt},
                         {"split_name", which},
                         {"split", split_to_json(spec)},
                         {"conf", conf},
                         {"nms_iou", nms_iou},
                         {"images", sp.images},
                         {"draw", draw},
                         {"model", model::model_config_to_json(meta.config)}});

        std::vector<int> cats = sp.categories;
        std::sort(cats.begin(), cats.end());
        cats.erase(std::unique(cats.begin(), cats.end()), cats.end());
        if (cats.empty()) throw UsageError("detect: no categories in the chosen split");

        const data::ImageStore store(manifest);
        const auto vectors = eval::compute_category_vectors(*det, store, sp.refs, cats);
        const std::map<int, std::string> names = category_names(manifest);
        const int anchor_size = det->config().anchor_image_size;

        const fs::path dump_path = dirs.reports / "detections.jsonl";
        std::ofstream dump(dump_path, std::ios::binary | std::ios::trunc);
        if (!dump) throw IoError("cannot open " + dump_path.string());
        const fs::path annotated = dirs.reports / "annotated";
        if (draw) {
            std::error_code ec;
            fs::create_directories(annotated, ec);
            if (ec) throw IoError("cannot create " + annotated.string() + ": " + ec.message());
        }

        std::size_t total = 0;
        for (int index : sp.images) {
            data::ImageSample sample = store.sample(index);
            const bool native_ok = sample.width() == sample.height() &&
                                   sample.width() % 32 == 0 && sample.width() >= 32;
            if (!native_ok) sample = data::resize_sample(sample, anchor_size, anchor_size);
            const int size = sample.width();
            const Tensor<float> img = reshape(sample.image, {1, 3, size, size});
            std::vector<Detection> dets = det->forward_detect(img, vectors, conf);
            for (auto& d : dets) d.category_id = cats[static_cast<std::size_t>(d.category_id)];
            dets = eval::nms(dets, nms_iou);
            for (const auto& d : dets) {
                json line{{"image", sample.id},
                          {"box",
                           {{"cx", d.box.cx}, {"cy", d.box.cy}, {"w", d.box.w}, {"h", d.box.h}}},
                          {"category", d.category_id},
                          {"name", names.count(d.category_id) ? names.at(d.category_id) : ""},
                          {"score", d.score}};
                dump << line.dump() << "\n";
                ++total;
            }
            if (draw) {
                std::vector<unsigned char> rgb = data::rgb8_from_tensor(sample.image);
                for (const auto& d : dets) {
                    const auto& c = kPalette[static_cast<std::size_t>(d.category_id) %
                                             kPalette.size()];
                    data::draw_box_outline(rgb, size, size, d.box, c[0], c[1], c[2]);
                }
                data::write_rgb8((annotated / (sample.id + ".png")).string(), size, size, rgb);
            }
        }
        dump.flush();
        if (!dump) throw IoError("write failed: " + dump_path.string());
        std::cout << "detect[" << which << "]: " << total << " detections over "
                  << sp.images.size() << " images\n"
                  << "wrote " << dump_path.string() << "\n";
        return 0;
    }
};

struct ExportCmd {
    std::string data_dir, ckpt, out, config_path;
    std::vector<int> cats_flag;
    int max_per_cat = 20;
    CLI::App* cmd = nullptr;
    CLI::Option* cats_opt = nullptr;

    void attach(CLI::App& app) {
        cmd = app.add_subcommand("export-vectors",
                                 "Write per-scale reweighting vectors and their cosine geometry");
        cmd->add_option("--data", data_dir, "Dataset directory (holds manifest.jsonl)")->required();
        cmd->add_option("--ckpt", ckpt, "Checkpoint")->required();
        cmd->add_option("--out", out, "Run directory")->required();
        cmd->add_option("--config", config_path, "JSON config file");
        cats_opt = cmd->add_option("--cats", cats_flag, "Category ids (default: all)")
                       ->delimiter(',');
        cmd->add_option("--max-per-cat", max_per_cat, "Support images per category");
    }

    int run() const {
        load_config_file(config_path);
        const data::DatasetManifest manifest = load_dataset(data_dir);
        const std::unique_ptr<model::Detector<float>> det = train::load_detector<float>(ckpt);
        std::vector<int> cats;
        if (cats_opt->count() > 0) cats = cats_flag;
        else for (const auto& cat : manifest.categories) cats.push_back(cat.id);
        std::sort(cats.begin(), cats.end());
        cats.erase(std::unique(cats.begin(), cats.end()), cats.end());
        if (cats.empty()) throw UsageError("export-vectors: no categories");

        const auto refs = whole_image_refs(manifest, cats, max_per_cat);
        const data::ImageStore store(manifest);
        const auto vectors = eval::compute_category_vectors(*det, store, refs, cats);
        const OutLayout dirs = prepare_out(out);

        json ref_counts = json::object();
        for (const auto& [cat, list] : refs) ref_counts[std::to_string(cat)] = list.size();
        write_json_file(dirs.reports / "export_config.json", {{"command", "export-vectors"},
                                                              {"data", data_dir},
                                                              {"ckpt", ckpt},
                                                              {"cats", cats},
                                                              {"max_per_cat", max_per_cat},
                                                              {"supports", ref_counts}});

        for (std::size_t s = 0; s < vectors.size(); ++s) {
            const fs::path path =
                dirs.reports / ("vectors_s" + std::to_string(loss::kStrides[s]) + ".csv");
            std::ofstream csv(path, std::ios::binary | std::ios::trunc);
            if (!csv) throw IoError("cannot open " + path.string());
            csv << "category,dim,value\n";
            const Tensor<float>& v = vectors[s];
            const float* vals = v.data();
            char buf[64];
            for (int r = 0; r < v.dim(0); ++r) {
                for (int c = 0; c < v.dim(1); ++c) {
                    std::snprintf(buf, sizeof buf, "%.9g",
                                  static_cast<double>(vals[r * v.dim(1) + c]));
                    csv << cats[static_cast<std::size_t>(r)] << ',' << c << ',' << buf << '\n';
                }
            }
            csv.flush();
            if (!csv) throw IoError("write failed: " + path.string());
        }

        // The cosine geometry needs two supports per category and two
        // categories; thin pools still get their vectors exported.
        try {
            const eval::ClusterResult cluster = eval::reweighting_cluster_metric(*det, store, refs);
            eval::write_cluster_csv(cluster.rows, (dirs.reports / "cluster.csv").string());
            write_json_file(dirs.reports / "cluster_summary.json",
                            eval::cluster_summary_to_json(cluster));
            for (std::size_t s = 0; s < cluster.summary.size(); ++s) {
                const eval::ClusterScaleSummary& sc = cluster.summary[s];
                std::cout << "stride " << loss::kStrides[s] << ": intra " << sc.intra
                          << "  inter " << sc.inter << "  ratio " << sc.ratio << "\n";
            }
        } catch (const UsageError& e) {
            std::cerr << "cluster metric skipped: " << e.what() << "\n";
        }
        std::cout << "wrote vectors for " << cats.size() << " categories to "
                  << dirs.reports.string() << "\n";
        return 0;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot object detector on synthetic shape scenes"};
    app.require_subcommand(1);

    GenCmd gen;
    TrainBaseCmd train_base;
    FinetuneCmd finetune;
    EvaluateCmd evaluate;
    ShotsCmd shots;
    DetectCmd detect;
    ExportCmd export_vectors;
    gen.attach(app);
    train_base.attach(app);
    finetune.attach(app);
    evaluate.attach(app);
    shots.attach(app);
    detect.attach(app);
    export_vectors.attach(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (gen.cmd->parsed()) return gen.run();
        if (train_base.cmd->parsed()) return train_base.run();
        if (finetune.cmd->parsed()) return finetune.run();
        if (evaluate.cmd->parsed()) return evaluate.run();
        if (shots.cmd->parsed()) return shots.run();
        if (detect.cmd->parsed()) return detect.run();
        if (export_vectors.cmd->parsed()) return export_vectors.run();
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
