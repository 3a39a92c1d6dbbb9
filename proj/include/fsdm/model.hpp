#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsdm/matching.hpp"
#include "fsdm/ops.hpp"
#include "fsdm/rng.hpp"

namespace fsdm::model {

struct ModelConfig {
    int num_categories = 8;      // categories the heads are conditioned on
    double width_scale = 0.25;   // multiplier on the reference channel widths
    int rw_input = 128;          // support image side fed to the reweighter
    int anchor_image_size = 128; // size at which the anchor table is defined
    int k_shot = 0;              // supports per category (0 until finetuning)
    std::uint64_t seed = 1;
};

inline void validate(const ModelConfig& cfg) {
    if (cfg.num_categories < 1) throw UsageError("model: num_categories must be >= 1");
    if (!(cfg.width_scale > 0.0 && cfg.width_scale <= 1.0)) {
        throw UsageError("model: width_scale must lie in (0, 1]");
    }
    if (cfg.rw_input < 64 || cfg.rw_input % 32 != 0) {
        throw UsageError("model: rw_input must be a multiple of 32 and >= 64");
    }
    if (cfg.anchor_image_size < 32) throw UsageError("model: anchor_image_size must be >= 32");
    if (cfg.k_shot < 0) throw UsageError("model: k_shot must be >= 0");
}

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
    return {{"num_categories", cfg.num_categories},
            {"width_scale", cfg.width_scale},
            {"rw_input", cfg.rw_input},
            {"anchor_image_size", cfg.anchor_image_size},
            {"k_shot", cfg.k_shot},
            {"seed", cfg.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    for (const auto& [key, value] : j.items()) {
        if (key == "num_categories") cfg.num_categories = value.get<int>();
        else if (key == "width_scale") cfg.width_scale = value.get<double>();
        else if (key == "rw_input") cfg.rw_input = value.get<int>();
        else if (key == "anchor_image_size") cfg.anchor_image_size = value.get<int>();
        else if (key == "k_shot") cfg.k_shot = value.get<int>();
        else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
        else throw UsageError("model config: unknown key '" + key + "'");
    }
    validate(cfg);
    return cfg;
}

// Support-conditioned multi-scale detector. A shared backbone + top-down neck
// turns a query into three feature maps (strides 32/16/8); a reweighting
// branch turns masked supports into one vector per category and scale; heads
// score each (category, anchor, cell) after channelwise reweighting.
template <class T>
class Detector {
   public:
    explicit Detector(const ModelConfig& cfg) : cfg_(cfg) {
        validate(cfg);
        Rng rng(derive_seed(cfg.seed, 0x6d6f64656cULL));
        const int w0 = width(32);
        const std::array<int, 5> w{width(64), width(128), width(256), width(512), width(1024)};

        stem_ = make_conv("backbone.stem", 3, w0, 3, rng);
        int cin = w0;
        for (int s = 0; s < 5; ++s) {
            const std::string base = "backbone.s" + std::to_string(s + 1);
            stages_[s].down = make_conv(base + ".down", cin, w[s], 3, rng);
            const int mid = std::max(1, w[s] / 2);
            for (int b = 0; b < 2; ++b) {
                const std::string bb = base + ".r" + std::to_string(b + 1);
                stages_[s].blocks[b].c1 = make_conv(bb + ".c1", w[s], mid, 1, rng);
                stages_[s].blocks[b].c2 = make_conv(bb + ".c2", mid, w[s], 3, rng);
            }
            cin = w[s];
        }
        neck_f1_ = make_conv("neck.f1", w[4], w[4], 3, rng);
        neck_f2_ = make_conv("neck.f2", w[4] + w[3], w[3], 3, rng);
        neck_f3_ = make_conv("neck.f3", w[3] + w[2], w[2], 3, rng);

        const std::array<int, 9> rw{width(32),  width(64),  width(128),
                                    width(256), width(256), width(512),
                                    width(512), width(1024), width(1024)};
        rw_[0] = make_conv("rw.c1", 4, rw[0], 3, rng);
        rw_[1] = make_conv("rw.c2", rw[0], rw[1], 3, rng);
        rw_[2] = make_conv("rw.c3", rw[1], rw[2], 3, rng);
        rw_[3] = make_conv("rw.c4", rw[2], rw[3], 3, rng);
        rw_[4] = make_conv("rw.c5", rw[3], rw[4], 3, rng);
        rw_[5] = make_conv("rw.c6", rw[3], rw[5], 3, rng);  // routed from the 4th pool
        rw_[6] = make_conv("rw.c7", rw[5], rw[6], 3, rng);
        rw_[7] = make_conv("rw.c8", rw[5], rw[7], 3, rng);  // routed from the 5th pool
        rw_[8] = make_conv("rw.c9", rw[7], rw[8], 3, rng);

        // Heads start at 1/16 of the Kaiming bound: features are products of
        // two activation-scale factors, so full-scale heads saturate the
        // objectness sigmoid at init and the clamped log loss stops learning.
        const std::array<int, 3> feat{w[4], w[3], w[2]};
        for (int s = 0; s < 3; ++s) {
            heads_[s] = make_conv("head.s" + std::to_string(s), feat[s],
                                  loss::kAnchorsPerScale * 6, 1, rng, 0.0625);
        }
    }

    const ModelConfig& config() const { return cfg_; }

    // Feature channels per scale, coarsest first.
    std::array<int, 3> feature_dims() const {
        return {width(1024), width(512), width(256)};
    }

    // Anchor table at the native size, rescaled proportionally elsewhere.
    loss::AnchorSet anchors_for(int image_size) const {
        loss::AnchorSet native = loss::AnchorSet::defaults(cfg_.anchor_image_size);
        if (image_size == cfg_.anchor_image_size) return native;
        return native.rescaled(cfg_.anchor_image_size, image_size);
    }

    std::vector<Parameter<T>>& parameters() { return params_; }
    const std::vector<Parameter<T>>& parameters() const { return params_; }

    std::vector<Parameter<T>> trainable_parameters() const {
        std::vector<Parameter<T>> out;
        for (const auto& p : params_) {
            if (p.tensor.requires_grad()) out.push_back(p);
        }
        return out;
    }

    // Finetuning keeps the stem and the first three stages fixed.
    void set_finetune_mode(bool on) {
        static const std::array<const char*, 4> frozen{"backbone.stem", "backbone.s1.",
                                                       "backbone.s2.", "backbone.s3."};
        for (auto& p : params_) {
            bool freeze = false;
            for (const char* prefix : frozen) {
                if (on && p.name.rfind(prefix, 0) == 0) freeze = true;
            }
            p.tensor.set_requires_grad(!freeze);
        }
    }

    // [1,3,H,W] query (H = W, multiple of 32) -> maps at strides 32, 16, 8.
    std::array<Tensor<T>, 3> extract_meta_features(const Tensor<T>& image) const {
        if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3) {
            throw DimensionError("extract_meta_features: expected [1,3,H,W], got " +
                                 shape_str(image.shape()));
        }
        if (image.dim(2) != image.dim(3) || image.dim(2) % 32 != 0 || image.dim(2) < 32) {
            throw DimensionError("extract_meta_features: spatial extent must be square and a "
                                 "multiple of 32, got " +
                                 shape_str(image.shape()));
        }
        Tensor<T> x = conv_leaky(stem_, image, 1);
        std::array<Tensor<T>, 3> taps;
        for (int s = 0; s < 5; ++s) {
            x = maxpool2d(x);
            x = conv_leaky(stages_[s].down, x, 1);
            for (const auto& b : stages_[s].blocks) {
                Tensor<T> y = conv_leaky(b.c1, x, 0);
                y = conv_leaky(b.c2, y, 1);
                x = add(x, y);
            }
            if (s >= 2) taps[static_cast<std::size_t>(s - 2)] = x;  // C3, C4, C5
        }
        Tensor<T> f1 = conv_leaky(neck_f1_, taps[2], 1);
        Tensor<T> f2 = conv_leaky(neck_f2_, concat_channels(upsample_nearest2x(f1), taps[1]), 1);
        Tensor<T> f3 = conv_leaky(neck_f3_, concat_channels(upsample_nearest2x(f2), taps[0]), 1);
        return {f1, f2, f3};
    }

    // [N,4,rw,rw] masked supports -> one vector per category for each scale,
    // dimensions matching feature_dims().
    std::array<Tensor<T>, 3> reweighting_vectors(const Tensor<T>& supports) const {
        if (supports.rank() != 4 || supports.dim(1) != 4 || supports.dim(2) != cfg_.rw_input ||
            supports.dim(3) != cfg_.rw_input) {
            throw DimensionError("reweighting_vectors: expected [N,4," +
                                 std::to_string(cfg_.rw_input) + "," +
                                 std::to_string(cfg_.rw_input) + "], got " +
                                 shape_str(supports.shape()));
        }
        Tensor<T> x = conv_leaky(rw_[0], supports, 1);
        x = maxpool2d(x);
        x = conv_leaky(rw_[1], x, 1);
        x = maxpool2d(x);
        x = conv_leaky(rw_[2], x, 1);
        x = maxpool2d(x);
        x = conv_leaky(rw_[3], x, 1);
        Tensor<T> p4 = maxpool2d(x);
        Tensor<T> fine = global_maxpool(conv_leaky(rw_[4], p4, 1));
        Tensor<T> p5 = maxpool2d(conv_leaky(rw_[5], p4, 1));
        Tensor<T> mid = global_maxpool(conv_leaky(rw_[6], p5, 1));
        Tensor<T> p6 = maxpool2d(conv_leaky(rw_[7], p5, 1));
        Tensor<T> coarse = global_maxpool(conv_leaky(rw_[8], p6, 1));
        return {coarse, mid, fine};
    }

    // Reweights one query's features by every category vector and applies the
    // shared heads: raw[s] is [N, 18, g, g], category-major.
    std::array<Tensor<T>, 3> predict_raw(const std::array<Tensor<T>, 3>& features,
                                         const std::array<Tensor<T>, 3>& vectors) const {
        std::array<Tensor<T>, 3> raw;
        for (int s = 0; s < 3; ++s) {
            const Tensor<T>& f = features[static_cast<std::size_t>(s)];
            const Tensor<T>& v = vectors[static_cast<std::size_t>(s)];
            if (f.rank() != 4 || f.dim(0) != 1) {
                throw DimensionError("predict_raw: features must be [1,C,g,g], got " +
                                     shape_str(f.shape()));
            }
            if (v.rank() != 2 || v.dim(1) != f.dim(1)) {
                throw DimensionError("predict_raw: scale " + std::to_string(s) + " vectors " +
                                     shape_str(v.shape()) + " do not match features " +
                                     shape_str(f.shape()));
            }
            std::vector<Tensor<T>> scaled;
            for (int c = 0; c < v.dim(0); ++c) {
                scaled.push_back(channelwise_scale(f, select_row(v, c)));
            }
            raw[static_cast<std::size_t>(s)] =
                conv2d(concat_batch(scaled), heads_[static_cast<std::size_t>(s)].w,
                       heads_[static_cast<std::size_t>(s)].b, 1, 0);
        }
        return raw;
    }

    // Value-space decoding of raw head outputs into thresholded detections.
    // Class probabilities are a softmax across category maps at the same
    // (cell, anchor); the box and objectness come from the argmax category.
    std::vector<Detection> decode_detections(const std::array<Tensor<T>, 3>& raw, int image_size,
                                             double conf_threshold) const {
        const loss::AnchorSet anchors = anchors_for(image_size);
        std::vector<Detection> dets;
        for (int s = 0; s < 3; ++s) {
            const Tensor<T>& r = raw[static_cast<std::size_t>(s)];
            const int g = image_size / loss::kStrides[static_cast<std::size_t>(s)];
            if (r.rank() != 4 || r.dim(1) != loss::kAnchorsPerScale * 6 || r.dim(2) != g ||
                r.dim(3) != g) {
                throw DimensionError("decode_detections: scale " + std::to_string(s) +
                                     " expected [N,18," + std::to_string(g) + "," +
                                     std::to_string(g) + "], got " + shape_str(r.shape()));
            }
            const int n = r.dim(0);
            const T* d = r.data();
            auto at = [&](int c, int ch, int y, int x) {
                return static_cast<double>(
                    d[((static_cast<std::int64_t>(c) * 18 + ch) * g + y) * g + x]);
            };
            for (int y = 0; y < g; ++y) {
                for (int x = 0; x < g; ++x) {
                    for (int a = 0; a < loss::kAnchorsPerScale; ++a) {
                        std::vector<double> probs(static_cast<std::size_t>(n));
                        double mx = -1e300;
                        for (int c = 0; c < n; ++c) {
                            probs[static_cast<std::size_t>(c)] = at(c, a * 6 + 5, y, x);
                            mx = std::max(mx, probs[static_cast<std::size_t>(c)]);
                        }
                        double z = 0;
                        for (auto& p : probs) z += (p = std::exp(p - mx));
                        int best = 0;
                        for (int c = 0; c < n; ++c) {
                            probs[static_cast<std::size_t>(c)] /= z;
                            if (probs[static_cast<std::size_t>(c)] >
                                probs[static_cast<std::size_t>(best)]) {
                                best = c;
                            }
                        }
                        const double po = 1.0 / (1.0 + std::exp(-at(best, a * 6 + 4, y, x)));
                        const double score = po * probs[static_cast<std::size_t>(best)];
                        if (score < conf_threshold) continue;
                        Detection det;
                        det.box = loss::decode_box(
                            at(best, a * 6 + 0, y, x), at(best, a * 6 + 1, y, x),
                            at(best, a * 6 + 2, y, x), at(best, a * 6 + 3, y, x),
                            anchors.sizes[static_cast<std::size_t>(s)]
                                         [static_cast<std::size_t>(a)][0],
                            anchors.sizes[static_cast<std::size_t>(s)]
                                         [static_cast<std::size_t>(a)][1],
                            x, y, loss::kStrides[static_cast<std::size_t>(s)]);
                        det.objectness = po;
                        det.class_probs = probs;
                        det.category_id = best;
                        det.score = score;
                        dets.push_back(std::move(det));
                    }
                }
            }
        }
        return dets;
    }

    // Full inference path for one query against precomputed vectors.
    std::vector<Detection> forward_detect(const Tensor<T>& image,
                                          const std::array<Tensor<T>, 3>& vectors,
                                          double conf_threshold) const {
        NoGradGuard ng;
        return decode_detections(predict_raw(extract_meta_features(image), vectors), image.dim(2),
                                 conf_threshold);
    }

   private:
    struct Conv {
        Tensor<T> w, b;
    };
    struct Block {
        Conv c1, c2;
    };
    struct Stage {
        Conv down;
        std::array<Block, 2> blocks;
    };

    int width(int reference) const {
        return std::max(1, static_cast<int>(std::lround(reference * cfg_.width_scale)));
    }

    Conv make_conv(const std::string& name, int cin, int cout, int k, Rng& rng,
                   double bound_scale = 1.0) {
        const double bound = bound_scale * std::sqrt(6.0 / (static_cast<double>(cin) * k * k));
        std::vector<T> w(static_cast<std::size_t>(cout) * cin * k * k);
        for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
        Conv c;
        c.w = Tensor<T>::from_data({cout, cin, k, k}, std::move(w));
        c.w.set_requires_grad(true);
        c.b = Tensor<T>::zeros({cout});
        c.b.set_requires_grad(true);
        params_.push_back({name + ".w", c.w});
        params_.push_back({name + ".b", c.b});
        return c;
    }

    Tensor<T> conv_leaky(const Conv& c, const Tensor<T>& x, int padding) const {
        return leaky_relu(conv2d(x, c.w, c.b, 1, padding));
    }

    ModelConfig cfg_;
    std::vector<Parameter<T>> params_;
    Conv stem_;
    std::array<Stage, 5> stages_;
    Conv neck_f1_, neck_f2_, neck_f3_;
    std::array<Conv, 9> rw_;
    std::array<Conv, 3> heads_;
};

}  // namespace fsdm::model
