#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsdm/box.hpp"
#include "fsdm/dataset.hpp"
#include "fsdm/image.hpp"
#include "fsdm/model.hpp"
#include "fsdm/train.hpp"

namespace fsdm::eval {

struct EvalConfig {
    double conf = 0.005;    // decode threshold for the precision/recall sweep
    double nms_iou = 0.45;  // suppression overlap, strict
    double match_iou = 0.5; // true-positive overlap, inclusive
    int threads = 1;
};

inline void validate(const EvalConfig& cfg) {
    if (cfg.conf < 0.0) throw UsageError("eval: conf must be >= 0");
    if (!(cfg.nms_iou > 0.0 && cfg.nms_iou < 1.0)) throw UsageError("eval: nms_iou must lie in (0, 1)");
    if (!(cfg.match_iou > 0.0 && cfg.match_iou < 1.0)) {
        throw UsageError("eval: match_iou must lie in (0, 1)");
    }
    if (cfg.threads < 1) throw UsageError("eval: threads must be >= 1");
}

// Greedy per-category suppression: keep the highest-scoring box, drop boxes
// overlapping it by more than the threshold, repeat. Output is sorted by
// descending score with the input order breaking ties.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold = 0.45) {
    std::map<int, std::vector<std::size_t>> by_cat;
    for (std::size_t i = 0; i < dets.size(); ++i) by_cat[dets[i].category_id].push_back(i);

    std::vector<std::size_t> kept;
    for (auto& [cat, idx] : by_cat) {
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return dets[a].score > dets[b].score;
        });
        std::vector<bool> dead(idx.size(), false);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (dead[i]) continue;
            kept.push_back(idx[i]);
            for (std::size_t j = i + 1; j < idx.size(); ++j) {
                if (!dead[j] && iou(dets[idx[i]].box, dets[idx[j]].box) > iou_threshold) {
                    dead[j] = true;
                }
            }
        }
    }
    std::stable_sort(kept.begin(), kept.end(), [&](std::size_t a, std::size_t b) {
        if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
        return a < b;
    });
    std::vector<Detection> out;
    out.reserve(kept.size());
    for (std::size_t i : kept) out.push_back(dets[i]);
    return out;
}

struct DetectionMatch {
    double score = 0;
    int category_id = -1;
    bool tp = false;
};

// Greedy matching in descending score order: each detection claims the
// highest-overlap unmatched ground truth of its category; the claim is a
// true positive when the overlap reaches the threshold, and each ground
// truth can be claimed once.
inline std::vector<DetectionMatch> match_detections(const std::vector<Detection>& dets,
                                                    const std::vector<BoxAnnotation>& gts,
                                                    double iou_threshold = 0.5) {
    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return dets[a].score > dets[b].score;
    });

    std::vector<bool> taken(gts.size(), false);
    std::vector<DetectionMatch> out;
    out.reserve(dets.size());
    for (std::size_t i : order) {
        const Detection& d = dets[i];
        double best = -1.0;
        int best_gt = -1;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g] || gts[g].category_id != d.category_id) continue;
            const double v = iou(d.box, gts[g].box());
            if (v > best) {
                best = v;
                best_gt = static_cast<int>(g);
            }
        }
        DetectionMatch m;
        m.score = d.score;
        m.category_id = d.category_id;
        m.tp = best_gt >= 0 && best >= iou_threshold;
        if (m.tp) taken[static_cast<std::size_t>(best_gt)] = true;
        out.push_back(m);
    }
    return out;
}

// Eleven-point interpolated average precision: mean over recall thresholds
// {0, 0.1, ..., 1.0} of the maximum precision at recall >= threshold, zero
// where no operating point reaches it.
inline double voc_ap_11point(std::vector<std::pair<double, bool>> scored_tp, int num_gt) {
    if (num_gt < 1) throw UsageError("voc_ap_11point: num_gt must be >= 1");
    std::stable_sort(scored_tp.begin(), scored_tp.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<double> recalls, precisions;
    int tp = 0, fp = 0;
    for (const auto& [score, is_tp] : scored_tp) {
        (void)score;
        is_tp ? ++tp : ++fp;
        recalls.push_back(static_cast<double>(tp) / num_gt);
        precisions.push_back(static_cast<double>(tp) / (tp + fp));
    }
    double ap = 0.0;
    for (int i = 0; i <= 10; ++i) {
        const double r = i / 10.0;
        double best = 0.0;
        for (std::size_t k = 0; k < recalls.size(); ++k) {
            if (recalls[k] >= r) best = std::max(best, precisions[k]);
        }
        ap += best;
    }
    return ap / 11.0;
}

// Fixed conditioning for a run: the reweighting vectors of every support in
// a category's pool, averaged per scale. Rows follow `categories` order.
inline std::array<Tensor<float>, 3> compute_category_vectors(
    const model::Detector<float>& det, const data::ImageStore& store,
    const std::map<int, std::vector<data::SupportRef>>& support_refs,
    const std::vector<int>& categories) {
    if (categories.empty()) throw UsageError("compute_category_vectors: no categories");
    NoGradGuard ng;
    const int rw = det.config().rw_input;
    std::array<std::vector<float>, 3> rows;
    std::array<int, 3> width{};
    for (int cat : categories) {
        auto it = support_refs.find(cat);
        if (it == support_refs.end() || it->second.empty()) {
            throw UsageError("compute_category_vectors: no support pool for category " +
                             std::to_string(cat));
        }
        std::vector<data::SupportSample> supports;
        supports.reserve(it->second.size());
        for (const auto& ref : it->second) {
            supports.push_back(data::make_support(store, ref, cat, rw));
        }
        const auto vecs = det.reweighting_vectors(data::stack_supports(supports));
        for (int s = 0; s < 3; ++s) {
            const Tensor<float>& v = vecs[static_cast<std::size_t>(s)];
            const int R = v.dim(0), C = v.dim(1);
            width[static_cast<std::size_t>(s)] = C;
            for (int c = 0; c < C; ++c) {
                double acc = 0.0;
                for (int r = 0; r < R; ++r) acc += v.values()[static_cast<std::size_t>(r) * C + c];
                rows[static_cast<std::size_t>(s)].push_back(static_cast<float>(acc / R));
            }
        }
    }
    std::array<Tensor<float>, 3> out;
    for (int s = 0; s < 3; ++s) {
        out[static_cast<std::size_t>(s)] = Tensor<float>::from_data(
            {static_cast<int>(categories.size()), width[static_cast<std::size_t>(s)]},
            std::move(rows[static_cast<std::size_t>(s)]));
    }
    return out;
}

struct CategoryEval {
    int gt = 0;
    int detections = 0;
    int tp = 0;
    int fp = 0;
    double ap = 0.0;  // meaningful only when gt > 0
};

struct EvalReport {
    std::map<int, CategoryEval> per_category;
    double map = 0.0;
    bool map_defined = false;
    int images = 0;
    nlohmann::json config;
};

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
    nlohmann::json cats = nlohmann::json::object();
    for (const auto& [id, ce] : r.per_category) {
        nlohmann::json c{{"gt", ce.gt}, {"detections", ce.detections}, {"tp", ce.tp}, {"fp", ce.fp}};
        if (ce.gt > 0) c["ap"] = ce.ap;  // categories without ground truth carry no AP
        cats[std::to_string(id)] = std::move(c);
    }
    nlohmann::json j{{"categories", std::move(cats)},
                     {"map_defined", r.map_defined},
                     {"images", r.images},
                     {"config", r.config}};
    if (r.map_defined) j["map"] = r.map;
    return j;
}

// Detection evaluation over an image list with fixed support conditioning.
// Images are processed independently (optionally across threads) and reduced
// in index order, so the report does not depend on the thread count.
inline EvalReport evaluate(const model::Detector<float>& det, const data::ImageStore& store,
                           const std::vector<int>& categories,
                           const std::vector<int>& image_indices,
                           const std::map<int, std::vector<data::SupportRef>>& support_refs,
                           const EvalConfig& cfg = {}, nlohmann::json config_echo = {}) {
    validate(cfg);
    std::vector<int> cats = categories;
    std::sort(cats.begin(), cats.end());
    cats.erase(std::unique(cats.begin(), cats.end()), cats.end());
    if (cats.empty()) throw UsageError("evaluate: no categories");

    EvalReport report;
    report.images = static_cast<int>(image_indices.size());
    report.config = std::move(config_echo);
    for (int c : cats) report.per_category[c] = {};
    if (image_indices.empty()) return report;

    const auto vectors = compute_category_vectors(det, store, support_refs, cats);
    const std::set<int> cat_set(cats.begin(), cats.end());
    const int anchor_size = det.config().anchor_image_size;

    struct ImageResult {
        std::map<int, std::vector<std::pair<double, bool>>> scored;
        std::map<int, int> gt_count;
    };
    std::vector<ImageResult> results(image_indices.size());

    auto run_one = [&](std::size_t slot) {
        const int index = image_indices[slot];
        data::ImageSample sample = store.sample(index);
        const bool native_ok = sample.width() == sample.height() && sample.width() % 32 == 0 &&
                               sample.width() >= 32;
        if (!native_ok) sample = data::resize_sample(sample, anchor_size, anchor_size);
        const int size = sample.width();

        ImageResult& r = results[slot];
        std::vector<BoxAnnotation> gts;
        for (const auto& b : sample.boxes) {
            if (cat_set.count(b.category_id)) {
                gts.push_back(b);
                r.gt_count[b.category_id]++;
            }
        }
        Tensor<float> img = reshape(sample.image, {1, 3, size, size});
        std::vector<Detection> dets = det.forward_detect(img, vectors, cfg.conf);
        for (auto& d : dets) d.category_id = cats[static_cast<std::size_t>(d.category_id)];
        dets = nms(dets, cfg.nms_iou);
        for (const auto& m : match_detections(dets, gts, cfg.match_iou)) {
            r.scored[m.category_id].emplace_back(m.score, m.tp);
        }
    };

    if (cfg.threads == 1 || image_indices.size() <= 1) {
        for (std::size_t i = 0; i < image_indices.size(); ++i) run_one(i);
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (std::size_t i = next.fetch_add(1); i < image_indices.size();
                 i = next.fetch_add(1)) {
                run_one(i);
            }
        };
        const int n_threads =
            std::min<int>(cfg.threads, static_cast<int>(image_indices.size()));
        std::vector<std::thread> threads;
        threads.reserve(static_cast<std::size_t>(n_threads));
        for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }

    std::map<int, std::vector<std::pair<double, bool>>> scored;
    for (const ImageResult& r : results) {
        for (const auto& [cat, n] : r.gt_count) report.per_category[cat].gt += n;
        for (const auto& [cat, list] : r.scored) {
            auto& dst = scored[cat];
            dst.insert(dst.end(), list.begin(), list.end());
            auto& ce = report.per_category[cat];
            ce.detections += static_cast<int>(list.size());
            for (const auto& [score, tp] : list) {
                (void)score;
                tp ? ++ce.tp : ++ce.fp;
            }
        }
    }
    double ap_sum = 0.0;
    int ap_count = 0;
    for (auto& [cat, ce] : report.per_category) {
        if (ce.gt == 0) continue;
        ce.ap = voc_ap_11point(scored[cat], ce.gt);
        ap_sum += ce.ap;
        ++ap_count;
    }
    if (ap_count > 0) {
        report.map = ap_sum / ap_count;
        report.map_defined = true;
    }
    return report;
}

struct ShotsRow {
    int shots = 0;
    std::string category;  // "mean" rows summarize a shot count
    double ap = 0.0;
};

struct ShotsConfig {
    std::vector<int> shot_list{3, 5, 10};
    int seeds = 3;
    train::TrainConfig finetune;
    EvalConfig eval;
};

// For each shot count: re-split, finetune `seeds` replicates from the same
// base checkpoint with fresh derived seeds, evaluate the novel categories on
// held-out novel images, and average the APs per category across replicates.
inline std::vector<ShotsRow> shots_experiment(const data::DatasetManifest& manifest,
                                              const data::ImageStore& store,
                                              const std::string& base_checkpoint,
                                              const std::vector<int>& base_categories,
                                              const std::vector<int>& novel_categories,
                                              const ShotsConfig& cfg) {
    if (cfg.shot_list.empty()) throw UsageError("shots: empty shot list");
    if (cfg.seeds < 1) throw UsageError("shots: seeds must be >= 1");
    std::vector<int> novel = novel_categories;
    std::sort(novel.begin(), novel.end());

    std::vector<ShotsRow> rows;
    for (int k : cfg.shot_list) {
        data::SplitSpec spec;
        spec.base_categories = base_categories;
        spec.novel_categories = novel_categories;
        spec.k_shot = k;
        const data::Pools pools = data::split_base_novel(manifest, spec);

        std::map<int, double> ap_sum;
        std::map<int, int> ap_n;
        for (int rep = 0; rep < cfg.seeds; ++rep) {
            auto det = train::load_detector<float>(base_checkpoint);
            train::TrainConfig ft = cfg.finetune;
            ft.seed = derive_seed(cfg.finetune.seed,
                                  (static_cast<std::uint64_t>(k) << 16) |
                                      static_cast<std::uint64_t>(rep));
            train::TrainResult tr = train::finetune_novel(store, pools, *det, ft, {});
            if (tr.diverged) {
                throw NumericError("shots: finetune diverged at " + std::to_string(k) +
                                   " shots, replicate " + std::to_string(rep));
            }
            EvalReport rep_eval =
                evaluate(*det, store, novel, pools.novel_eval, pools.novel_support, cfg.eval);
            for (const auto& [cat, ce] : rep_eval.per_category) {
                if (ce.gt == 0) continue;
                ap_sum[cat] += ce.ap;
                ap_n[cat]++;
            }
        }
        double mean_sum = 0.0;
        int mean_n = 0;
        for (int cat : novel) {
            if (ap_n.count(cat) == 0) continue;
            const double ap = ap_sum[cat] / ap_n[cat];
            rows.push_back({k, manifest.categories[static_cast<std::size_t>(cat)].name, ap});
            mean_sum += ap;
            ++mean_n;
        }
        rows.push_back({k, "mean", mean_n > 0 ? mean_sum / mean_n : 0.0});
    }
    return rows;
}

inline void write_shots_csv(const std::vector<ShotsRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("shots: cannot open " + path);
    out << "shots,category,ap\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.6f", r.ap);
        out << r.shots << ',' << r.category << ',' << buf << '\n';
    }
    if (!out) throw IoError("shots: write failed for " + path);
}

struct ClusterRow {
    int scale = 0;
    int category_a = 0;
    int category_b = 0;
    double mean_cosine = 0.0;
};

struct ClusterScaleSummary {
    double intra = 0.0;
    double inter = 0.0;
    double ratio = 0.0;  // intra - inter
};

struct ClusterResult {
    std::vector<ClusterRow> rows;  // upper triangle incl. diagonal, per scale
    std::array<ClusterScaleSummary, 3> summary;
};

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Pairwise cosine structure over vecs[scale][category] = nonzero vector rows.
// Categories keep at least two usable vectors per scale; at least two
// categories must survive.
inline ClusterResult cluster_from_vectors(
    std::array<std::map<int, std::vector<std::vector<double>>>, 3> vecs) {
    ClusterResult out;
    for (int s = 0; s < 3; ++s) {
        auto& by_cat = vecs[static_cast<std::size_t>(s)];
        std::vector<int> cats;
        for (auto it = by_cat.begin(); it != by_cat.end();) {
            if (it->second.size() < 2) {
                std::cerr << "cluster metric: dropping category " << it->first << " at scale " << s
                          << " (fewer than two usable supports)\n";
                it = by_cat.erase(it);
            } else {
                cats.push_back(it->first);
                ++it;
            }
        }
        if (cats.size() < 2) {
            throw UsageError("cluster metric: need at least two categories with two usable "
                             "supports at scale " +
                             std::to_string(s));
        }
        double intra_sum = 0.0, inter_sum = 0.0;
        std::int64_t intra_n = 0, inter_n = 0;
        for (std::size_t ai = 0; ai < cats.size(); ++ai) {
            for (std::size_t bi = ai; bi < cats.size(); ++bi) {
                const auto& va = by_cat[cats[ai]];
                const auto& vb = by_cat[cats[bi]];
                double sum = 0.0;
                std::int64_t n = 0;
                if (ai == bi) {
                    for (std::size_t i = 0; i < va.size(); ++i) {
                        for (std::size_t j = i + 1; j < va.size(); ++j) {
                            sum += cosine_similarity(va[i], va[j]);
                            ++n;
                        }
                    }
                    intra_sum += sum;
                    intra_n += n;
                } else {
                    for (const auto& x : va) {
                        for (const auto& y : vb) {
                            sum += cosine_similarity(x, y);
                            ++n;
                        }
                    }
                    inter_sum += sum;
                    inter_n += n;
                }
                out.rows.push_back({s, cats[ai], cats[bi], sum / n});
            }
        }
        auto& sm = out.summary[static_cast<std::size_t>(s)];
        sm.intra = intra_sum / intra_n;
        sm.inter = inter_sum / inter_n;
        sm.ratio = sm.intra - sm.inter;
    }
    return out;
}

// Cluster metric over real support pools: per-support reweighting vectors,
// zero vectors excluded with a warning.
inline ClusterResult reweighting_cluster_metric(
    const model::Detector<float>& det, const data::ImageStore& store,
    const std::map<int, std::vector<data::SupportRef>>& support_refs) {
    NoGradGuard ng;
    const int rw = det.config().rw_input;
    std::array<std::map<int, std::vector<std::vector<double>>>, 3> vecs;
    for (const auto& [cat, refs] : support_refs) {
        if (refs.size() < 2) {
            throw UsageError("cluster metric: category " + std::to_string(cat) +
                             " has fewer than two supports");
        }
        std::vector<data::SupportSample> supports;
        supports.reserve(refs.size());
        for (const auto& ref : refs) supports.push_back(data::make_support(store, ref, cat, rw));
        const auto v = det.reweighting_vectors(data::stack_supports(supports));
        for (int s = 0; s < 3; ++s) {
            const Tensor<float>& m = v[static_cast<std::size_t>(s)];
            const int R = m.dim(0), C = m.dim(1);
            for (int r = 0; r < R; ++r) {
                std::vector<double> row(static_cast<std::size_t>(C));
                double norm2 = 0.0;
                for (int c = 0; c < C; ++c) {
                    row[static_cast<std::size_t>(c)] =
                        m.values()[static_cast<std::size_t>(r) * C + c];
                    norm2 += row[static_cast<std::size_t>(c)] * row[static_cast<std::size_t>(c)];
                }
                if (norm2 == 0.0) {
                    std::cerr << "cluster metric: dropping zero vector (category " << cat
                              << ", support " << r << ", scale " << s << ")\n";
                    continue;
                }
                vecs[static_cast<std::size_t>(s)][cat].push_back(std::move(row));
            }
        }
    }
    return cluster_from_vectors(std::move(vecs));
}

inline void write_cluster_csv(const std::vector<ClusterRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cluster: cannot open " + path);
    out << "scale,category_a,category_b,mean_cosine\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.6f", r.mean_cosine);
        out << r.scale << ',' << r.category_a << ',' << r.category_b << ',' << buf << '\n';
    }
    if (!out) throw IoError("cluster: write failed for " + path);
}

inline nlohmann::json cluster_summary_to_json(const ClusterResult& r) {
    nlohmann::json scales = nlohmann::json::array();
    for (int s = 0; s < 3; ++s) {
        const auto& sm = r.summary[static_cast<std::size_t>(s)];
        scales.push_back({{"scale", s}, {"intra", sm.intra}, {"inter", sm.inter}, {"ratio", sm.ratio}});
    }
    return {{"scales", std::move(scales)}};
}

}  // namespace fsdm::eval
