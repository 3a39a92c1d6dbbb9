#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fsdm/box.hpp"
#include "fsdm/errors.hpp"

// Anchor grids, anchor/ground-truth assignment, and the box offset
// transform shared by target encoding and prediction decoding.

namespace fsdm::loss {

inline constexpr std::array<int, 3> kStrides{32, 16, 8};  // scale 0 is coarsest
inline constexpr int kAnchorsPerScale = 3;

// Anchor extents in pixels, indexed [scale][anchor] = {w, h}.
struct AnchorSet {
    std::array<std::array<std::array<double, 2>, 3>, 3> sizes{};

    // The reference detector's nine anchors, defined on 800 px inputs,
    // scaled to `image_size` and rounded to whole pixels.
    static AnchorSet defaults(int image_size) {
        static constexpr double base[3][3][2] = {
            {{116, 90}, {156, 198}, {373, 326}},
            {{30, 61}, {62, 45}, {59, 119}},
            {{10, 13}, {16, 30}, {33, 23}},
        };
        AnchorSet out;
        for (int s = 0; s < 3; ++s) {
            for (int a = 0; a < 3; ++a) {
                for (int d = 0; d < 2; ++d) {
                    out.sizes[s][a][d] =
                        static_cast<double>(std::lround(base[s][a][d] * image_size / 800.0));
                }
            }
        }
        return out;
    }

    // Proportional rescale for multi-scale training, no rounding.
    AnchorSet rescaled(int from_size, int to_size) const {
        AnchorSet out = *this;
        const double f = static_cast<double>(to_size) / from_size;
        for (auto& scale : out.sizes) {
            for (auto& a : scale) {
                a[0] *= f;
                a[1] *= f;
            }
        }
        return out;
    }

    // Anchor box tiled at cell (x, y) of the given scale's grid.
    Box anchor_box(int scale, int y, int x, int anchor) const {
        const double stride = kStrides[static_cast<std::size_t>(scale)];
        const auto& a = sizes[static_cast<std::size_t>(scale)][static_cast<std::size_t>(anchor)];
        return {(x + 0.5) * stride, (y + 0.5) * stride, a[0], a[1]};
    }
};

enum class AnchorLabel : std::uint8_t { negative, ignored, positive };

struct AnchorMatch {
    AnchorLabel label = AnchorLabel::negative;
    int gt_index = -1;  // valid when positive
};

struct MatchResult {
    std::array<std::vector<AnchorMatch>, 3> labels;  // per scale, ((y*W + x)*3 + a)
    std::array<int, 3> grid{};                       // cells per side at each scale
    std::vector<std::array<int, 4>> forced;          // per gt: {scale, y, x, anchor}

    const AnchorMatch& at(int scale, int y, int x, int a) const {
        const int g = grid[static_cast<std::size_t>(scale)];
        return labels[static_cast<std::size_t>(scale)]
                     [static_cast<std::size_t>((y * g + x) * kAnchorsPerScale + a)];
    }
};

// Assignment rules: an anchor is positive when its IoU with some ground truth
// exceeds pos_thr (matched to the argmax ground truth) or when it is forced as
// the global best for a ground truth; negative when its best IoU is below
// neg_thr and it was not forced; ignored otherwise. Forcing walks ground
// truths in index order and skips anchors already forced, breaking IoU ties
// by scan order (scale, row, column, anchor).
inline MatchResult match_anchors(const std::vector<BoxAnnotation>& gts, const AnchorSet& anchors,
                                 int image_size, double pos_thr = 0.7, double neg_thr = 0.3) {
    if (!(0.0 <= neg_thr && neg_thr <= pos_thr && pos_thr <= 1.0)) {
        throw UsageError("match_anchors: thresholds must satisfy 0 <= neg <= pos <= 1");
    }
    MatchResult r;
    for (int s = 0; s < 3; ++s) {
        const int stride = kStrides[static_cast<std::size_t>(s)];
        if (image_size % stride != 0 || image_size < stride) {
            throw DimensionError("match_anchors: image size " + std::to_string(image_size) +
                                 " not divisible by stride " + std::to_string(stride));
        }
        const int g = image_size / stride;
        r.grid[static_cast<std::size_t>(s)] = g;
        auto& lab = r.labels[static_cast<std::size_t>(s)];
        lab.assign(static_cast<std::size_t>(g) * g * kAnchorsPerScale, {});
        for (int y = 0; y < g; ++y) {
            for (int x = 0; x < g; ++x) {
                for (int a = 0; a < kAnchorsPerScale; ++a) {
                    const Box ab = anchors.anchor_box(s, y, x, a);
                    double best = -1.0;
                    int best_gt = -1;
                    for (std::size_t i = 0; i < gts.size(); ++i) {
                        const double v = iou(ab, gts[i].box());
                        if (v > best) {
                            best = v;
                            best_gt = static_cast<int>(i);
                        }
                    }
                    auto& m = lab[static_cast<std::size_t>((y * g + x) * kAnchorsPerScale + a)];
                    if (best > pos_thr) {
                        m = {AnchorLabel::positive, best_gt};
                    } else if (best >= 0.0 && best < neg_thr) {
                        m = {AnchorLabel::negative, -1};
                    } else if (best >= 0.0) {
                        m = {AnchorLabel::ignored, -1};
                    }
                    // no ground truths at all: default negative
                }
            }
        }
    }

    for (std::size_t i = 0; i < gts.size(); ++i) {
        double best = -1.0;
        std::array<int, 4> where{-1, -1, -1, -1};
        for (int s = 0; s < 3; ++s) {
            const int g = r.grid[static_cast<std::size_t>(s)];
            for (int y = 0; y < g; ++y) {
                for (int x = 0; x < g; ++x) {
                    for (int a = 0; a < kAnchorsPerScale; ++a) {
                        bool taken = false;
                        for (std::size_t j = 0; j < i; ++j) {
                            if (r.forced[j] == std::array<int, 4>{s, y, x, a}) taken = true;
                        }
                        if (taken) continue;
                        const double v = iou(anchors.anchor_box(s, y, x, a), gts[i].box());
                        if (v > best) {
                            best = v;
                            where = {s, y, x, a};
                        }
                    }
                }
            }
        }
        r.forced.push_back(where);
        const int g = r.grid[static_cast<std::size_t>(where[0])];
        r.labels[static_cast<std::size_t>(where[0])]
                [static_cast<std::size_t>((where[1] * g + where[2]) * kAnchorsPerScale + where[3])] =
            {AnchorLabel::positive, static_cast<int>(i)};
    }
    return r;
}

// Offset-space encoding, the inverse of the decode transform: the center
// becomes a logit of its position within the cell, the extent a log ratio to
// the anchor. Centers on cell boundaries are clamped ε inside.
inline std::array<double, 4> encode_targets(const Box& gt, double a_w, double a_h, int cell_x,
                                            int cell_y, int stride, double eps = 1e-6) {
    if (!(gt.w > 0 && gt.h > 0)) {
        throw UsageError("encode_targets: ground-truth extents must be positive");
    }
    auto logit = [eps](double frac) {
        const double f = std::min(1.0 - eps, std::max(eps, frac));
        return std::log(f / (1.0 - f));
    };
    return {logit(gt.cx / stride - cell_x), logit(gt.cy / stride - cell_y), std::log(gt.w / a_w),
            std::log(gt.h / a_h)};
}

// b = (σ·(S(x_p)+ĉ_x), σ·(S(y_p)+ĉ_y), a_w·e^{w_p}, a_h·e^{h_p}).
inline Box decode_box(double x_p, double y_p, double w_p, double h_p, double a_w, double a_h,
                      int cell_x, int cell_y, int stride) {
    auto sig = [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); };
    return {stride * (sig(x_p) + cell_x), stride * (sig(y_p) + cell_y), a_w * std::exp(w_p),
            a_h * std::exp(h_p)};
}

}  // namespace fsdm::loss
