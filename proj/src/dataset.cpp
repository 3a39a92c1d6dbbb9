#include "fsdm/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <unordered_set>

#include "fsdm/errors.hpp"
#include "fsdm/png_io.hpp"

namespace fsdm::data {

namespace {

std::vector<int> sorted_copy(std::vector<int> v) {
    std::sort(v.begin(), v.end());
    return v;
}

const std::string& category_name(const DatasetManifest& m, int cat) {
    return m.categories.at(cat).name;
}

// Greedy fill in image order: take instances until `quota` are selected.
// Returns refs covering min(quota, available) instances.
std::vector<SupportRef> greedy_instances(const DatasetManifest& m,
                                         const std::vector<int>& image_indices, int cat,
                                         int quota, int* taken_out) {
    std::vector<SupportRef> refs;
    int taken = 0;
    for (int idx : image_indices) {
        if (taken >= quota) break;
        SupportRef ref;
        ref.image_index = idx;
        const auto& boxes = m.images[idx].boxes;
        for (int b = 0; b < static_cast<int>(boxes.size()) && taken < quota; ++b) {
            if (boxes[b].category_id != cat) continue;
            ref.box_indices.push_back(b);
            ++taken;
        }
        if (!ref.box_indices.empty()) refs.push_back(std::move(ref));
    }
    *taken_out = taken;
    return refs;
}

}  // namespace

Tensor<float> make_support_mask(int height, int width, const std::vector<BoxAnnotation>& boxes,
                                int category_id) {
    if (height <= 0 || width <= 0) {
        throw UsageError("make_support_mask: non-positive size " + std::to_string(height) + "x" +
                         std::to_string(width));
    }
    std::vector<const BoxAnnotation*> hits;
    for (const auto& b : boxes) {
        if (b.category_id == category_id) hits.push_back(&b);
    }
    std::vector<float> mask(static_cast<size_t>(height) * width, 0.0f);
    if (hits.empty()) {
        std::fprintf(stderr, "make_support_mask: no boxes of category %d, mask is all zero\n",
                     category_id);
        return Tensor<float>::from_data({1, height, width}, std::move(mask));
    }
    for (const BoxAnnotation* b : hits) {
        const Box box = b->box();
        for (int y = 0; y < height; ++y) {
            const double cy = y + 0.5;
            if (cy < box.y1() || cy >= box.y2()) continue;
            for (int x = 0; x < width; ++x) {
                const double cx = x + 0.5;
                if (cx >= box.x1() && cx < box.x2()) {
                    mask[static_cast<size_t>(y) * width + x] = 1.0f;
                }
            }
        }
    }
    return Tensor<float>::from_data({1, height, width}, std::move(mask));
}

std::vector<ImageSample> crop_patches(const ImageSample& sample, int patch, int stride,
                                      double min_overlap) {
    const int h = sample.height(), w = sample.width();
    if (patch <= 0 || patch > h || patch > w) {
        throw UsageError("crop_patches: patch " + std::to_string(patch) +
                         " exceeds image extent " + std::to_string(w) + "x" + std::to_string(h));
    }
    if (stride < 1) throw UsageError("crop_patches: stride must be >= 1");
    if (!(min_overlap > 0.0 && min_overlap <= 1.0)) {
        throw UsageError("crop_patches: min_overlap must lie in (0, 1]");
    }
    const float* src = sample.image.data();
    std::vector<ImageSample> patches;
    for (int y0 = 0; y0 + patch <= h; y0 += stride) {
        for (int x0 = 0; x0 + patch <= w; x0 += stride) {
            ImageSample p;
            p.id = sample.id + "_" + std::to_string(x0) + "_" + std::to_string(y0);
            std::vector<float> v(static_cast<size_t>(3) * patch * patch);
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < patch; ++y) {
                    const float* row = src + (static_cast<size_t>(c) * h + y0 + y) * w + x0;
                    std::copy(row, row + patch, v.begin() + (static_cast<size_t>(c) * patch + y) * patch);
                }
            }
            p.image = Tensor<float>::from_data({3, patch, patch}, std::move(v));
            for (const auto& b : sample.boxes) {
                const Box orig = b.box();
                const double ix1 = std::max(orig.x1(), static_cast<double>(x0));
                const double iy1 = std::max(orig.y1(), static_cast<double>(y0));
                const double ix2 = std::min(orig.x2(), static_cast<double>(x0 + patch));
                const double iy2 = std::min(orig.y2(), static_cast<double>(y0 + patch));
                if (ix2 <= ix1 || iy2 <= iy1) continue;
                const double kept = (ix2 - ix1) * (iy2 - iy1);
                if (kept < min_overlap * orig.area()) continue;
                BoxAnnotation nb;
                nb.cx = (ix1 + ix2) / 2.0 - x0;
                nb.cy = (iy1 + iy2) / 2.0 - y0;
                nb.w = ix2 - ix1;
                nb.h = iy2 - iy1;
                nb.category_id = b.category_id;
                p.boxes.push_back(nb);
            }
            patches.push_back(std::move(p));
        }
    }
    return patches;
}

Pools split_base_novel(const DatasetManifest& manifest, const SplitSpec& spec) {
    const int ncat = static_cast<int>(manifest.categories.size());
    std::vector<int> owner(ncat, -1);
    auto claim = [&](const std::vector<int>& ids, int who) {
        for (int c : ids) {
            if (c < 0 || c >= ncat) {
                throw UsageError("split_base_novel: category id " + std::to_string(c) +
                                 " outside manifest table of size " + std::to_string(ncat));
            }
            if (owner[c] != -1) {
                throw UsageError("split_base_novel: category " + category_name(manifest, c) +
                                 " assigned twice");
            }
            owner[c] = who;
        }
    };
    claim(spec.base_categories, 0);
    claim(spec.novel_categories, 1);
    for (int c = 0; c < ncat; ++c) {
        if (owner[c] == -1) {
            throw UsageError("split_base_novel: category " + category_name(manifest, c) +
                             " is in neither split");
        }
    }
    if (spec.k_shot < 1) {
        throw CapacityError("split_base_novel: k_shot must be >= 1, got " +
                            std::to_string(spec.k_shot));
    }

    Pools pools;
    pools.spec = spec;
    pools.spec.base_categories = sorted_copy(spec.base_categories);
    pools.spec.novel_categories = sorted_copy(spec.novel_categories);

    std::vector<int> base_images, novel_images;
    for (int i = 0; i < static_cast<int>(manifest.images.size()); ++i) {
        bool has_novel = false;
        for (const auto& b : manifest.images[i].boxes) {
            if (owner[b.category_id] == 1) {
                has_novel = true;
                break;
            }
        }
        (has_novel ? novel_images : base_images).push_back(i);
    }

    // Held-out fifth of the base images, carved with a manifest-seeded shuffle
    // so the split is a pure function of the dataset.
    {
        std::vector<int> shuffled = base_images;
        Rng rng(derive_seed(manifest.seed, 0x6576616cULL));
        rng.shuffle_seq(shuffled.begin(), shuffled.end());
        const int n_eval = static_cast<int>(shuffled.size()) / 5;
        pools.base_eval.assign(shuffled.begin(), shuffled.begin() + n_eval);
        pools.base_train.assign(shuffled.begin() + n_eval, shuffled.end());
        std::sort(pools.base_eval.begin(), pools.base_eval.end());
        std::sort(pools.base_train.begin(), pools.base_train.end());
    }

    for (int c : pools.spec.base_categories) {
        std::vector<int>& list = pools.base_train_by_cat[c];
        for (int idx : pools.base_train) {
            for (const auto& b : manifest.images[idx].boxes) {
                if (b.category_id == c) {
                    list.push_back(idx);
                    break;
                }
            }
        }
    }

    std::unordered_set<int> support_touched;
    for (int c : pools.spec.novel_categories) {
        int taken = 0;
        auto refs = greedy_instances(manifest, novel_images, c, spec.k_shot, &taken);
        if (taken < spec.k_shot) {
            throw CapacityError("split_base_novel: category " + category_name(manifest, c) +
                                " has " + std::to_string(taken) + " instances, need k_shot=" +
                                std::to_string(spec.k_shot));
        }
        for (const auto& r : refs) support_touched.insert(r.image_index);
        pools.novel_support[c] = std::move(refs);
    }
    for (int idx : novel_images) {
        if (!support_touched.count(idx)) pools.novel_eval.push_back(idx);
    }

    for (int c : pools.spec.base_categories) {
        int taken = 0;
        auto refs = greedy_instances(manifest, pools.base_train, c, spec.k_shot, &taken);
        if (taken == 0) {
            throw CapacityError("split_base_novel: category " + category_name(manifest, c) +
                                " has no instances in the base training pool");
        }
        pools.base_support[c] = std::move(refs);
    }
    return pools;
}

std::vector<TuningItem> finetune_tuning_set(const DatasetManifest& manifest, const Pools& pools) {
    std::unordered_set<int> base_set(pools.spec.base_categories.begin(),
                                     pools.spec.base_categories.end());
    std::map<int, std::set<int>> by_image;
    for (const auto& [cat, refs] : pools.novel_support) {
        for (const auto& ref : refs) {
            auto& boxes = by_image[ref.image_index];
            boxes.insert(ref.box_indices.begin(), ref.box_indices.end());
            const auto& all = manifest.images[ref.image_index].boxes;
            for (int b = 0; b < static_cast<int>(all.size()); ++b) {
                if (base_set.count(all[b].category_id)) boxes.insert(b);
            }
        }
    }
    for (const auto& [cat, refs] : pools.base_support) {
        for (const auto& ref : refs) {
            auto& boxes = by_image[ref.image_index];
            const auto& all = manifest.images[ref.image_index].boxes;
            for (int b = 0; b < static_cast<int>(all.size()); ++b) boxes.insert(b);
        }
    }
    std::vector<TuningItem> items;
    for (const auto& [idx, boxes] : by_image) {
        TuningItem item;
        item.image_index = idx;
        item.box_indices.assign(boxes.begin(), boxes.end());
        items.push_back(std::move(item));
    }
    return items;
}

Tensor<float> ImageStore::image(int index) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = cache_.find(index);
    if (it != cache_.end()) return it->second;
    const ImageRecord& rec = manifest_->images.at(index);
    int w = 0, h = 0;
    std::vector<unsigned char> rgb = read_rgb8(manifest_->image_path(index), w, h);
    if (w != rec.width || h != rec.height) {
        throw IoError("ImageStore: " + rec.id + " is " + std::to_string(w) + "x" +
                      std::to_string(h) + " on disk but " + std::to_string(rec.width) + "x" +
                      std::to_string(rec.height) + " in the manifest");
    }
    Tensor<float> t = tensor_from_rgb8(rgb, w, h);
    cache_.emplace(index, t);
    return t;
}

ImageSample ImageStore::sample(int index) const {
    const ImageRecord& rec = manifest_->images.at(index);
    ImageSample s;
    s.id = rec.id;
    s.image = image(index);
    s.boxes = rec.boxes;
    return s;
}

SupportSample make_support(const ImageStore& store, const SupportRef& ref, int category_id,
                           int rw_size) {
    const ImageRecord& rec = store.manifest().images.at(ref.image_index);
    Tensor<float> img = store.image(ref.image_index);
    const double sx = static_cast<double>(rw_size) / rec.width;
    const double sy = static_cast<double>(rw_size) / rec.height;
    std::vector<BoxAnnotation> selected;
    for (int b : ref.box_indices) {
        BoxAnnotation ann = rec.boxes.at(b);
        ann.cx *= sx;
        ann.w *= sx;
        ann.cy *= sy;
        ann.h *= sy;
        selected.push_back(ann);
    }
    SupportSample s;
    s.category_id = category_id;
    s.image = resize_bilinear(img, rw_size, rw_size);
    s.mask = make_support_mask(rw_size, rw_size, selected, category_id);
    return s;
}

namespace {

Episode assemble(const ImageStore& store, ImageSample query,
                 const std::vector<int>& active_categories,
                 const std::map<int, std::vector<SupportRef>>& ref_pools,
                 const std::map<int, std::vector<SupportRef>>& ref_pools2, int rw_size,
                 Rng& rng) {
    Episode ep;
    ep.query = std::move(query);
    std::vector<int> active = sorted_copy(active_categories);
    for (int cat : active) {
        const std::vector<SupportRef>* refs = nullptr;
        if (auto it = ref_pools.find(cat); it != ref_pools.end()) refs = &it->second;
        else if (auto it2 = ref_pools2.find(cat); it2 != ref_pools2.end()) refs = &it2->second;
        if (!refs || refs->empty()) {
            throw UsageError("build_episode: no supports available for category " +
                             std::to_string(cat));
        }
        const SupportRef& ref = (*refs)[rng.uniform_int(0, static_cast<int>(refs->size()) - 1)];
        ep.supports.push_back(make_support(store, ref, cat, rw_size));
    }
    return ep;
}

void keep_active_boxes(ImageSample& sample, const std::vector<int>& active) {
    std::unordered_set<int> keep(active.begin(), active.end());
    std::erase_if(sample.boxes, [&](const BoxAnnotation& b) { return !keep.count(b.category_id); });
}

}  // namespace

Episode build_base_episode(const ImageStore& store, const Pools& pools,
                           const std::vector<int>& active_categories, int query_index,
                           int rw_size, Rng& rng) {
    // One whole-image support per category, drawn fresh each episode.
    std::map<int, std::vector<SupportRef>> per_episode;
    std::vector<int> active = sorted_copy(active_categories);
    for (int cat : active) {
        auto it = pools.base_train_by_cat.find(cat);
        if (it == pools.base_train_by_cat.end() || it->second.empty()) {
            throw UsageError("build_base_episode: no base training images hold category " +
                             std::to_string(cat));
        }
        const int idx = it->second[rng.uniform_int(0, static_cast<int>(it->second.size()) - 1)];
        SupportRef ref;
        ref.image_index = idx;
        const auto& boxes = store.manifest().images[idx].boxes;
        for (int b = 0; b < static_cast<int>(boxes.size()); ++b) {
            if (boxes[b].category_id == cat) ref.box_indices.push_back(b);
        }
        per_episode[cat] = {std::move(ref)};
    }
    ImageSample query = store.sample(query_index);
    keep_active_boxes(query, active);
    Rng pick(0);  // single ref per pool, consumed deterministically
    return assemble(store, std::move(query), active, per_episode, {}, rw_size, pick);
}

Episode build_finetune_episode(const ImageStore& store, const Pools& pools,
                               const std::vector<int>& active_categories,
                               const TuningItem& item, int rw_size, Rng& rng) {
    const ImageRecord& rec = store.manifest().images.at(item.image_index);
    ImageSample query;
    query.id = rec.id;
    query.image = store.image(item.image_index);
    for (int b : item.box_indices) query.boxes.push_back(rec.boxes.at(b));
    keep_active_boxes(query, active_categories);
    return assemble(store, std::move(query), active_categories, pools.novel_support,
                    pools.base_support, rw_size, rng);
}

Tensor<float> stack_supports(const std::vector<SupportSample>& supports) {
    if (supports.empty()) throw UsageError("stack_supports: no supports given");
    const int rw = supports.front().image.dim(1);
    std::vector<float> vals;
    vals.reserve(static_cast<std::size_t>(supports.size()) * 4 * rw * rw);
    for (const SupportSample& s : supports) {
        if (s.image.shape() != std::vector<int>{3, rw, rw} ||
            s.mask.shape() != std::vector<int>{1, rw, rw}) {
            throw DimensionError("stack_supports: inconsistent support shapes");
        }
        vals.insert(vals.end(), s.image.values().begin(), s.image.values().end());
        vals.insert(vals.end(), s.mask.values().begin(), s.mask.values().end());
    }
    return Tensor<float>::from_data({static_cast<int>(supports.size()), 4, rw, rw},
                                    std::move(vals));
}

}  // namespace fsdm::data
