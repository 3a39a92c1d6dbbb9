#pragma once

#include <map>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "fsdm/image.hpp"
#include "fsdm/manifest.hpp"
#include "fsdm/rng.hpp"

namespace fsdm::data {

// Binary [1,H,W] mask: 1 exactly on pixels whose center lies inside any box
// of `category_id` in `boxes`. No matching box yields an all-zero mask plus a
// stderr warning.
Tensor<float> make_support_mask(int height, int width, const std::vector<BoxAnnotation>& boxes,
                                int category_id);

// Sliding-window crops with re-clipped boxes. A box survives when the clipped
// area is at least `min_overlap` of its original area; surviving boxes are
// translated into patch coordinates. Patch ids extend the source id with the
// window offset.
std::vector<ImageSample> crop_patches(const ImageSample& sample, int patch, int stride,
                                      double min_overlap = 0.7);

// A support drawn from one image, restricted to an explicit subset of its
// boxes so k-shot pools can hold exactly k instances.
struct SupportRef {
    int image_index = 0;
    std::vector<int> box_indices;
};

struct SplitSpec {
    std::vector<int> base_categories;
    std::vector<int> novel_categories;
    int k_shot = 0;
};

struct Pools {
    SplitSpec spec;
    std::vector<int> base_train;  // images with no novel instances, minus base_eval
    std::vector<int> base_eval;   // held-out fifth of the base images
    std::vector<int> novel_eval;  // novel-bearing images not used as supports
    std::map<int, std::vector<int>> base_train_by_cat;
    std::map<int, std::vector<SupportRef>> novel_support;  // exactly k_shot instances per cat
    std::map<int, std::vector<SupportRef>> base_support;   // at most k_shot instances per cat
};

// Category sets must be disjoint and cover the manifest's table. Novel
// supports are filled greedily in image order; images touched by any support
// are excluded from novel_eval.
Pools split_base_novel(const DatasetManifest& manifest, const SplitSpec& spec);

// Finetune supervision: every support image once, with the novel boxes that
// were selected into the pool plus all base-category boxes it carries.
struct TuningItem {
    int image_index = 0;
    std::vector<int> box_indices;
};
std::vector<TuningItem> finetune_tuning_set(const DatasetManifest& manifest, const Pools& pools);

// Decodes PNGs on demand and caches them; safe to share across threads.
class ImageStore {
   public:
    explicit ImageStore(const DatasetManifest& manifest) : manifest_(&manifest) {}

    const DatasetManifest& manifest() const { return *manifest_; }
    Tensor<float> image(int index) const;
    ImageSample sample(int index) const;

   private:
    const DatasetManifest* manifest_;
    mutable std::mutex mu_;
    mutable std::unordered_map<int, Tensor<float>> cache_;
};

struct SupportSample {
    int category_id = 0;
    Tensor<float> image;  // [3,rw,rw]
    Tensor<float> mask;   // [1,rw,rw]
};

struct Episode {
    ImageSample query;
    std::vector<SupportSample> supports;  // sorted by category_id
};

// Resizes the referenced image to the reweighting input size and builds the
// mask from the selected boxes scaled accordingly.
SupportSample make_support(const ImageStore& store, const SupportRef& ref, int category_id,
                           int rw_size);

// Base-stage episode: supports drawn uniformly from base_train images that
// contain each active category (all instances of the category count).
Episode build_base_episode(const ImageStore& store, const Pools& pools,
                           const std::vector<int>& active_categories, int query_index,
                           int rw_size, Rng& rng);

// Finetune episode: supports drawn uniformly from the fixed k-shot pools;
// query supervision comes from the tuning item's box subset.
Episode build_finetune_episode(const ImageStore& store, const Pools& pools,
                               const std::vector<int>& active_categories,
                               const TuningItem& item, int rw_size, Rng& rng);

// Stacks support (image, mask) pairs into the [N,4,rw,rw] reweighter input,
// preserving order.
Tensor<float> stack_supports(const std::vector<SupportSample>& supports);

}  // namespace fsdm::data
