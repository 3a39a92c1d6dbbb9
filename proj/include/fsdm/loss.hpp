#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fsdm/matching.hpp"
#include "fsdm/ops.hpp"
#include "fsdm/tensor.hpp"

// Episode loss over raw multi-scale predictions. Localization is mean-square
// error in offset space at positive anchors; objectness is a weighted
// positive/negative log loss; classification is cross-entropy over the
// per-(cell,anchor) softmax across the N category maps.

namespace fsdm::loss {

inline constexpr double kProbEps = 1e-7;

template <class T>
struct LossBreakdown {
    Tensor<T> loc, obj, noobj, cls, total;
    int n_pos = 0;
    int n_neg = 0;  // (negative anchor, category map) pairs
};

struct LossWeights {
    double w_obj = 1.0;
    double w_noobj = 0.5;
};

// raw[s]: Tensor[N, 18, G_s, G_s], one category-specific map per active
// category, ordered like `active_categories` (sorted ids). A positive anchor
// supervises location/objectness/class on its ground truth's category map
// only; on the other maps it is ignored. Negative anchors supervise
// objectness on every map.
template <class T>
LossBreakdown<T> total_loss(const std::array<Tensor<T>, 3>& raw,
                            const std::vector<BoxAnnotation>& gts,
                            const std::vector<int>& active_categories, const MatchResult& match,
                            const AnchorSet& anchors, LossWeights weights = {}) {
    const int num_cats = static_cast<int>(active_categories.size());
    if (num_cats == 0) throw UsageError("total_loss: no active categories");

    auto map_of = [&](int category_id) {
        for (int j = 0; j < num_cats; ++j) {
            if (active_categories[static_cast<std::size_t>(j)] == category_id) return j;
        }
        throw UsageError("total_loss: ground truth category " + std::to_string(category_id) +
                         " is not active");
    };

    std::vector<Tensor<T>> loc_parts, obj_parts, noobj_parts, cls_parts;
    std::vector<T> loc_targets;
    std::vector<int> cls_true;  // map index per positive
    int n_pos = 0, n_neg = 0;

    for (int s = 0; s < 3; ++s) {
        const auto& t = raw[static_cast<std::size_t>(s)];
        const int g = match.grid[static_cast<std::size_t>(s)];
        if (t.rank() != 4 || t.dim(0) != num_cats || t.dim(1) != 6 * kAnchorsPerScale ||
            t.dim(2) != g || t.dim(3) != g) {
            throw DimensionError("total_loss: prediction tensor " + shape_str(t.shape()) +
                                 " does not match " + std::to_string(num_cats) + " maps on a " +
                                 std::to_string(g) + "-cell grid");
        }
        const int stride = kStrides[static_cast<std::size_t>(s)];
        auto flat = [&](int map, int ch, int y, int x) {
            return static_cast<std::int64_t>(((map * 18 + ch) * g + y) * g + x);
        };

        std::vector<std::int64_t> loc_idx, obj_idx, neg_idx, cls_idx;
        for (int y = 0; y < g; ++y) {
            for (int x = 0; x < g; ++x) {
                for (int a = 0; a < kAnchorsPerScale; ++a) {
                    const AnchorMatch& m = match.at(s, y, x, a);
                    if (m.label == AnchorLabel::positive) {
                        const BoxAnnotation& gt = gts[static_cast<std::size_t>(m.gt_index)];
                        const int j = map_of(gt.category_id);
                        const auto& an =
                            anchors.sizes[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)];
                        const auto enc = encode_targets(gt.box(), an[0], an[1], x, y, stride);
                        for (int l = 0; l < 4; ++l) {
                            loc_idx.push_back(flat(j, a * 6 + l, y, x));
                            loc_targets.push_back(static_cast<T>(enc[static_cast<std::size_t>(l)]));
                        }
                        obj_idx.push_back(flat(j, a * 6 + 4, y, x));
                        for (int jj = 0; jj < num_cats; ++jj) {
                            cls_idx.push_back(flat(jj, a * 6 + 5, y, x));
                        }
                        cls_true.push_back(j);
                        ++n_pos;
                    } else if (m.label == AnchorLabel::negative) {
                        for (int jj = 0; jj < num_cats; ++jj) {
                            neg_idx.push_back(flat(jj, a * 6 + 4, y, x));
                            ++n_neg;
                        }
                    }
                }
            }
        }
        if (!loc_idx.empty()) loc_parts.push_back(gather(t, loc_idx));
        if (!obj_idx.empty()) obj_parts.push_back(gather(t, obj_idx));
        if (!neg_idx.empty()) noobj_parts.push_back(gather(t, neg_idx));
        if (!cls_idx.empty()) cls_parts.push_back(gather(t, cls_idx));
    }

    LossBreakdown<T> out;
    out.n_pos = n_pos;
    out.n_neg = n_neg;
    const auto zero = Tensor<T>::scalar(T(0));

    if (n_pos > 0) {
        auto pred = concat_batch(loc_parts);
        auto diff = sub(pred, Tensor<T>::from_data(pred.shape(), std::move(loc_targets)));
        out.loc = mul_scalar(sum(mul(diff, diff)), T(1) / n_pos);

        auto p = clamp(sigmoid(concat_batch(obj_parts)), T(kProbEps), T(1 - kProbEps));
        out.obj = mul_scalar(sum(fsdm::log(p)), T(-1) / n_pos);

        auto logits = reshape(concat_batch(cls_parts), {n_pos, num_cats});
        std::vector<std::int64_t> picks(static_cast<std::size_t>(n_pos));
        for (int i = 0; i < n_pos; ++i) {
            picks[static_cast<std::size_t>(i)] =
                static_cast<std::int64_t>(i) * num_cats + cls_true[static_cast<std::size_t>(i)];
        }
        out.cls = mul_scalar(sum(gather(log_softmax(logits, 1), picks)), T(-1) / n_pos);
    } else {
        out.loc = zero;
        out.obj = zero;
        out.cls = zero;
    }

    if (n_neg > 0) {
        auto p = clamp(sigmoid(concat_batch(noobj_parts)), T(kProbEps), T(1 - kProbEps));
        auto one_minus = add_scalar(mul_scalar(p, T(-1)), T(1));
        out.noobj = mul_scalar(sum(fsdm::log(one_minus)), T(-1) / n_neg);
    } else {
        out.noobj = zero;
    }

    out.total = add(add(add(out.loc, mul_scalar(out.obj, static_cast<T>(weights.w_obj))),
                        mul_scalar(out.noobj, static_cast<T>(weights.w_noobj))),
                    out.cls);
    return out;
}

}  // namespace fsdm::loss
