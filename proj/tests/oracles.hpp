#pragma once

// Independent reference implementations used only by tests. Everything here
// favours obviousness over speed: plain loops, no shared code with the
// library ops they are checking.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "fsdm/tensor.hpp"

namespace oracle {

// Direct 6-loop cross-correlation, [N,C,H,W] * [K,C,kh,kw] + bias[K].
template <class T>
std::vector<T> conv2d(const std::vector<T>& in, int N, int C, int H, int W,
                      const std::vector<T>& w, int K, int kh, int kw,
                      const std::vector<T>& bias, int stride, int pad) {
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    std::vector<T> out(static_cast<std::size_t>(N) * K * Ho * Wo, T(0));
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k)
            for (int y = 0; y < Ho; ++y)
                for (int x = 0; x < Wo; ++x) {
                    T acc = bias[static_cast<std::size_t>(k)];
                    for (int c = 0; c < C; ++c)
                        for (int i = 0; i < kh; ++i)
                            for (int j = 0; j < kw; ++j) {
                                const int sy = y * stride - pad + i;
                                const int sx = x * stride - pad + j;
                                if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                                acc += in[static_cast<std::size_t>(((n * C + c) * H + sy) * W + sx)] *
                                       w[static_cast<std::size_t>(((k * C + c) * kh + i) * kw + j)];
                            }
                    out[static_cast<std::size_t>(((n * K + k) * Ho + y) * Wo + x)] = acc;
                }
    return out;
}

template <class T>
std::vector<T> maxpool2d(const std::vector<T>& in, int N, int C, int H, int W, int kernel,
                         int stride) {
    const int Ho = (H - kernel) / stride + 1;
    const int Wo = (W - kernel) / stride + 1;
    std::vector<T> out(static_cast<std::size_t>(N) * C * Ho * Wo);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < Ho; ++y)
                for (int x = 0; x < Wo; ++x) {
                    T best = in[static_cast<std::size_t>(((n * C + c) * H + y * stride) * W + x * stride)];
                    for (int i = 0; i < kernel; ++i)
                        for (int j = 0; j < kernel; ++j) {
                            const T v = in[static_cast<std::size_t>(
                                ((n * C + c) * H + y * stride + i) * W + x * stride + j)];
                            if (v > best) best = v;
                        }
                    out[static_cast<std::size_t>(((n * C + c) * Ho + y) * Wo + x)] = best;
                }
    return out;
}

// Softmax of one row computed in long double.
inline std::vector<double> softmax_row(const std::vector<double>& row) {
    long double mx = row[0];
    for (double v : row) mx = std::max<long double>(mx, v);
    std::vector<long double> e(row.size());
    long double s = 0;
    for (std::size_t i = 0; i < row.size(); ++i) {
        e[i] = std::exp(static_cast<long double>(row[i]) - mx);
        s += e[i];
    }
    std::vector<double> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = static_cast<double>(e[i] / s);
    return out;
}

// Central finite differences against reverse-mode gradients, in double.
// `loss_fn` must rebuild the graph from the current parameter values.
struct GradCheckResult {
    double max_rel = 0.0;
    std::int64_t checked = 0;
};

inline GradCheckResult gradcheck(const std::function<fsdm::Tensor<double>()>& loss_fn,
                                 std::vector<fsdm::Tensor<double>> params, double h = 1e-4) {
    fsdm::Tensor<double> loss = loss_fn();
    fsdm::Gradients<double> grads = fsdm::backward(loss);
    GradCheckResult r;
    for (auto& p : params) {
        const std::vector<double>& ad = grads.at(p);
        double* d = p.mutable_data();
        for (std::size_t i = 0; i < ad.size(); ++i) {
            const double keep = d[i];
            d[i] = keep + h;
            const double up = loss_fn().item();
            d[i] = keep - h;
            const double dn = loss_fn().item();
            d[i] = keep;
            const double fd = (up - dn) / (2.0 * h);
            const double rel = std::abs(ad[i] - fd) / std::max({1.0, std::abs(ad[i]), std::abs(fd)});
            r.max_rel = std::max(r.max_rel, rel);
            ++r.checked;
        }
    }
    return r;
}

// Corner-form IoU, written independently of the library's center-form code.
struct Corners {
    double x1, y1, x2, y2;
};

inline double iou_corners(const Corners& a, const Corners& b) {
    const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (w <= 0 || h <= 0) return 0;
    const double inter = w * h;
    const double area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
    const double area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
    return inter / (area_a + area_b - inter);
}

// Literal three-rule anchor assigner over an explicit anchor list.
// labels: 1 positive, 0 ignored, -1 negative; gt_of holds the matched
// ground-truth index for positives.
struct BruteAssign {
    std::vector<int> labels;
    std::vector<int> gt_of;
};

inline BruteAssign brute_assign(const std::vector<Corners>& anchors,
                                const std::vector<Corners>& gts, double pos_thr, double neg_thr) {
    const std::size_t n = anchors.size();
    BruteAssign out;
    out.labels.assign(n, -1);
    out.gt_of.assign(n, -1);

    // rule 1: IoU above pos_thr with some gt (argmax gt, lowest index on ties)
    for (std::size_t i = 0; i < n; ++i) {
        double best = -1;
        int best_g = -1;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            const double v = iou_corners(anchors[i], gts[g]);
            if (v > best) {
                best = v;
                best_g = static_cast<int>(g);
            }
        }
        if (best > pos_thr) {
            out.labels[i] = 1;
            out.gt_of[i] = best_g;
        } else if (gts.empty() || best < neg_thr) {
            out.labels[i] = -1;
        } else {
            out.labels[i] = 0;
        }
    }

    // rule 2: force the globally best anchor per gt, in gt order, skipping
    // anchors already forced; ties broken by anchor scan order
    std::vector<bool> forced(n, false);
    for (std::size_t g = 0; g < gts.size(); ++g) {
        double best = -1;
        std::size_t best_i = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (forced[i]) continue;
            const double v = iou_corners(anchors[i], gts[g]);
            if (v > best) {
                best = v;
                best_i = i;
            }
        }
        forced[best_i] = true;
        out.labels[best_i] = 1;
        out.gt_of[best_i] = static_cast<int>(g);
    }
    return out;
}

}  // namespace oracle
