#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "fsdm/tensor.hpp"

// Free-function ops over Tensor<T>. Every op validates shapes, computes the
// forward value eagerly, and (when grad mode is on and an input requires
// grad) records a backward closure on the result node.

namespace fsdm {

namespace detail {

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <class T, class F>
Tensor<T> make_op(const char* opname, std::vector<int> shape, std::vector<T> value,
                  std::vector<Tensor<T>> parents, F&& bw) {
    if (shape_numel(shape) != static_cast<std::int64_t>(value.size())) {
        throw DimensionError(std::string(opname) + ": internal shape/value mismatch");
    }
    check_finite(opname, value);
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool need = false;
    if (grad_enabled()) {
        for (const auto& p : parents) need = need || p.requires_grad();
    }
    if (need) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (const auto& p : parents) node->parents.push_back(p.node());
        node->backward_fn = std::forward<F>(bw);
    }
    return Tensor<T>(node);
}

inline void require(bool ok, const char* opname, const std::string& msg) {
    if (!ok) throw DimensionError(std::string(opname) + ": " + msg);
}

// col is [C*kh*kw, Ho*Wo] row-major, padded positions zero-filled.
template <class T>
void im2col(const T* in, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, T* col) {
    const std::int64_t colw = static_cast<std::int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                T* dst = col + ((static_cast<std::int64_t>(c) * kh + i) * kw + j) * colw;
                for (int y = 0; y < Ho; ++y) {
                    const int sy = y * stride - pad + i;
                    T* drow = dst + static_cast<std::int64_t>(y) * Wo;
                    if (sy < 0 || sy >= H) {
                        std::fill(drow, drow + Wo, T(0));
                        continue;
                    }
                    const T* srow = in + (static_cast<std::int64_t>(c) * H + sy) * W;
                    for (int x = 0; x < Wo; ++x) {
                        const int sx = x * stride - pad + j;
                        drow[x] = (sx >= 0 && sx < W) ? srow[sx] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                int Ho, int Wo, T* in_grad) {
    const std::int64_t colw = static_cast<std::int64_t>(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                const T* src = col + ((static_cast<std::int64_t>(c) * kh + i) * kw + j) * colw;
                for (int y = 0; y < Ho; ++y) {
                    const int sy = y * stride - pad + i;
                    if (sy < 0 || sy >= H) continue;
                    T* grow = in_grad + (static_cast<std::int64_t>(c) * H + sy) * W;
                    const T* srow = src + static_cast<std::int64_t>(y) * Wo;
                    for (int x = 0; x < Wo; ++x) {
                        const int sx = x * stride - pad + j;
                        if (sx >= 0 && sx < W) grow[sx] += srow[x];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// --- convolution and pooling -------------------------------------------------

// Cross-correlation of input [N,C,H,W] with weight [K,C,kh,kw] plus bias [K].
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int padding = 0) {
    using detail::require;
    require(input.rank() == 4, "conv2d", "input must be 4-D [N,C,H,W], got " + shape_str(input.shape()));
    require(weight.rank() == 4, "conv2d", "weight must be 4-D [K,C,kh,kw], got " + shape_str(weight.shape()));
    require(bias.rank() == 1, "conv2d", "bias must be 1-D [K], got " + shape_str(bias.shape()));
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int K = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    require(weight.dim(1) == C, "conv2d",
            "input channels (axis 1) = " + std::to_string(C) + " but weight expects " + std::to_string(weight.dim(1)));
    require(bias.dim(0) == K, "conv2d",
            "bias length " + std::to_string(bias.dim(0)) + " != output channels " + std::to_string(K));
    require(kh % 2 == 1 && kw % 2 == 1, "conv2d", "kernel extents must be odd");
    require(stride >= 1 && padding >= 0, "conv2d", "stride must be >=1 and padding >=0");
    const int eh = H + 2 * padding - kh;
    const int ew = W + 2 * padding - kw;
    require(eh >= 0 && ew >= 0 && eh % stride == 0 && ew % stride == 0, "conv2d",
            "spatial extents " + std::to_string(H) + "x" + std::to_string(W) +
                " incompatible with kernel/stride/padding (axes 2,3)");
    const int Ho = eh / stride + 1;
    const int Wo = ew / stride + 1;

    const std::int64_t ckk = static_cast<std::int64_t>(C) * kh * kw;
    const std::int64_t hw = static_cast<std::int64_t>(Ho) * Wo;
    std::vector<T> out(static_cast<std::size_t>(N) * K * hw);
    std::vector<T> col(static_cast<std::size_t>(ckk) * hw);
    detail::ConstMatMap<T> wmat(weight.data(), K, ckk);
    detail::ConstVecMap<T> bvec(bias.data(), K);
    for (int n = 0; n < N; ++n) {
        detail::im2col(input.data() + static_cast<std::int64_t>(n) * C * H * W, C, H, W, kh, kw,
                       stride, padding, Ho, Wo, col.data());
        detail::ConstMatMap<T> cmat(col.data(), ckk, hw);
        detail::MatMap<T> omat(out.data() + static_cast<std::int64_t>(n) * K * hw, K, hw);
        omat.noalias() = wmat * cmat;
        omat.colwise() += bvec;
    }

    auto bw = [stride, padding](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        const auto& w = *self.parents[1];
        const auto& b = *self.parents[2];
        const int N = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
        const int K = w.shape[0], kh = w.shape[2], kw = w.shape[3];
        const int Ho = self.shape[2], Wo = self.shape[3];
        const std::int64_t ckk = static_cast<std::int64_t>(C) * kh * kw;
        const std::int64_t hw = static_cast<std::int64_t>(Ho) * Wo;
        std::vector<T> col(static_cast<std::size_t>(ckk) * hw);
        detail::ConstMatMap<T> wmat(w.value.data(), K, ckk);
        for (int n = 0; n < N; ++n) {
            detail::ConstMatMap<T> gmat(g.data() + static_cast<std::int64_t>(n) * K * hw, K, hw);
            if (w.requires_grad) {
                detail::im2col(in.value.data() + static_cast<std::int64_t>(n) * C * H * W, C, H, W,
                               kh, kw, stride, padding, Ho, Wo, col.data());
                detail::ConstMatMap<T> cmat(col.data(), ckk, hw);
                detail::MatMap<T> dw(gs.accumulator(&w).data(), K, ckk);
                dw.noalias() += gmat * cmat.transpose();
            }
            if (b.requires_grad) {
                // Fixed scan-order accumulation; Eigen's redux splits at an
                // address-dependent aligned offset, which perturbs ulps.
                std::vector<T>& db = gs.accumulator(&b);
                for (int k = 0; k < K; ++k) {
                    const T* gr = g.data() + (static_cast<std::int64_t>(n) * K + k) * hw;
                    T s = T(0);
                    for (std::int64_t i = 0; i < hw; ++i) s += gr[i];
                    db[static_cast<std::size_t>(k)] += s;
                }
            }
            if (in.requires_grad) {
                detail::MatMap<T> cg(col.data(), ckk, hw);
                cg.noalias() = wmat.transpose() * gmat;
                detail::col2im_add(col.data(), C, H, W, kh, kw, stride, padding, Ho, Wo,
                                   gs.accumulator(&in).data() + static_cast<std::int64_t>(n) * C * H * W);
            }
        }
    };
    return detail::make_op("conv2d", {N, K, Ho, Wo}, std::move(out), {input, weight, bias}, bw);
}

// Per-window maximum; gradient routes to the first maximal element in scan
// order within each window.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& input, int kernel = 2, int stride = 2) {
    using detail::require;
    require(input.rank() == 4, "maxpool2d", "input must be 4-D [N,C,H,W], got " + shape_str(input.shape()));
    require(kernel >= 1 && stride >= 1, "maxpool2d", "kernel and stride must be >= 1");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    require(H >= kernel && (H - kernel) % stride == 0, "maxpool2d",
            "height " + std::to_string(H) + " not coverable by kernel " + std::to_string(kernel) +
                " stride " + std::to_string(stride) + " (axis 2)");
    require(W >= kernel && (W - kernel) % stride == 0, "maxpool2d",
            "width " + std::to_string(W) + " not coverable by kernel " + std::to_string(kernel) +
                " stride " + std::to_string(stride) + " (axis 3)");
    const int Ho = (H - kernel) / stride + 1;
    const int Wo = (W - kernel) / stride + 1;

    std::vector<T> out(static_cast<std::size_t>(N) * C * Ho * Wo);
    std::vector<std::int64_t> argmax(out.size());
    std::int64_t o = 0;
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* plane = input.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * H * W;
            for (int y = 0; y < Ho; ++y) {
                for (int x = 0; x < Wo; ++x, ++o) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::int64_t besti = -1;
                    for (int i = 0; i < kernel; ++i) {
                        const int sy = y * stride + i;
                        for (int j = 0; j < kernel; ++j) {
                            const int sx = x * stride + j;
                            const T v = plane[static_cast<std::int64_t>(sy) * W + sx];
                            if (v > best) {
                                best = v;
                                besti = base + static_cast<std::int64_t>(sy) * W + sx;
                            }
                        }
                    }
                    out[static_cast<std::size_t>(o)] = best;
                    argmax[static_cast<std::size_t>(o)] = besti;
                }
            }
        }
    }

    auto bw = [argmax = std::move(argmax)](const TensorNode<T>& self, const std::vector<T>& g,
                                           Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        auto& acc = gs.accumulator(&in);
        for (std::size_t i = 0; i < g.size(); ++i) acc[static_cast<std::size_t>(argmax[i])] += g[i];
    };
    return detail::make_op("maxpool2d", {N, C, Ho, Wo}, std::move(out), {input}, bw);
}

// Per-channel spatial maximum: [N,C,H,W] -> [N,C]. This is the tap that
// produces reweighting vectors.
template <class T>
Tensor<T> global_maxpool(const Tensor<T>& input) {
    detail::require(input.rank() == 4, "global_maxpool",
                    "input must be 4-D [N,C,H,W], got " + shape_str(input.shape()));
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    detail::require(H >= 1 && W >= 1, "global_maxpool", "spatial extents must be >= 1 (axes 2,3)");
    std::vector<T> out(static_cast<std::size_t>(N) * C);
    std::vector<std::int64_t> argmax(out.size());
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
        const T* plane = input.data() + nc * hw;
        T best = plane[0];
        std::int64_t besti = 0;
        for (std::int64_t i = 1; i < hw; ++i) {
            if (plane[i] > best) {
                best = plane[i];
                besti = i;
            }
        }
        out[static_cast<std::size_t>(nc)] = best;
        argmax[static_cast<std::size_t>(nc)] = nc * hw + besti;
    }
    auto bw = [argmax = std::move(argmax)](const TensorNode<T>& self, const std::vector<T>& g,
                                           Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        auto& acc = gs.accumulator(&in);
        for (std::size_t i = 0; i < g.size(); ++i) acc[static_cast<std::size_t>(argmax[i])] += g[i];
    };
    return detail::make_op("global_maxpool", {N, C}, std::move(out), {input}, bw);
}

// out[n,c,h,w] = feature[n,c,h,w] * vec[c]; gradients flow to both operands.
template <class T>
Tensor<T> channelwise_scale(const Tensor<T>& feature, const Tensor<T>& vec) {
    using detail::require;
    require(feature.rank() == 4, "channelwise_scale",
            "feature must be 4-D [N,C,H,W], got " + shape_str(feature.shape()));
    require(vec.rank() == 1, "channelwise_scale", "vector must be 1-D, got " + shape_str(vec.shape()));
    const int N = feature.dim(0), C = feature.dim(1), H = feature.dim(2), W = feature.dim(3);
    require(vec.dim(0) == C, "channelwise_scale",
            "vector length " + std::to_string(vec.dim(0)) + " != channel count " + std::to_string(C) +
                " (axis 1)");
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    std::vector<T> out(feature.values().size());
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T s = vec.data()[c];
            const T* src = feature.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            T* dst = out.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] * s;
        }
    }
    auto bw = [](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& f = *self.parents[0];
        const auto& v = *self.parents[1];
        const int N = f.shape[0], C = f.shape[1];
        const std::int64_t hw = static_cast<std::int64_t>(f.shape[2]) * f.shape[3];
        if (f.requires_grad) {
            auto& acc = gs.accumulator(&f);
            for (int n = 0; n < N; ++n) {
                for (int c = 0; c < C; ++c) {
                    const T s = v.value[static_cast<std::size_t>(c)];
                    const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) acc[static_cast<std::size_t>(off + i)] += g[static_cast<std::size_t>(off + i)] * s;
                }
            }
        }
        if (v.requires_grad) {
            auto& acc = gs.accumulator(&v);
            for (int n = 0; n < N; ++n) {
                for (int c = 0; c < C; ++c) {
                    const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * hw;
                    T s = T(0);
                    for (std::int64_t i = 0; i < hw; ++i) s += g[static_cast<std::size_t>(off + i)] * f.value[static_cast<std::size_t>(off + i)];
                    acc[static_cast<std::size_t>(c)] += s;
                }
            }
        }
    };
    return detail::make_op("channelwise_scale", feature.shape(), std::move(out), {feature, vec}, bw);
}

// --- activations --------------------------------------------------------------

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.1)) {
    std::vector<T> out(x.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x.data()[i];
        out[i] = v > T(0) ? v : slope * v;
    }
    auto bw = [slope](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        auto& acc = gs.accumulator(&in);
        for (std::size_t i = 0; i < g.size(); ++i) {
            acc[i] += in.value[i] > T(0) ? g[i] : slope * g[i];
        }
    };
    return detail::make_op("leaky_relu", x.shape(), std::move(out), {x}, bw);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    std::vector<T> out(x.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x.data()[i];
        if (v >= T(0)) {
            out[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }
    auto bw = [](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        auto& acc = gs.accumulator(&in);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T y = self.value[i];
            acc[i] += g[i] * y * (T(1) - y);
        }
    };
    return detail::make_op("sigmoid", x.shape(), std::move(out), {x}, bw);
}

namespace detail {

// Decomposes a shape around `axis` into [outer, n, inner] strides.
inline void axis_split(const std::vector<int>& shape, int axis, std::int64_t& outer,
                       std::int64_t& n, std::int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
    n = shape[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace detail

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    detail::require(axis >= 0 && axis < x.rank(), "softmax",
                    "axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    std::int64_t outer, n, inner;
    detail::axis_split(x.shape(), axis, outer, n, inner);
    std::vector<T> out(x.values().size());
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            T mx = x.data()[base];
            for (std::int64_t k = 1; k < n; ++k) mx = std::max(mx, x.data()[base + k * inner]);
            T sum = T(0);
            for (std::int64_t k = 0; k < n; ++k) {
                const T e = std::exp(x.data()[base + k * inner] - mx);
                out[static_cast<std::size_t>(base + k * inner)] = e;
                sum += e;
            }
            for (std::int64_t k = 0; k < n; ++k) out[static_cast<std::size_t>(base + k * inner)] /= sum;
        }
    }
    auto bw = [axis](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        std::int64_t outer, n, inner;
        detail::axis_split(self.shape, axis, outer, n, inner);
        auto& acc = gs.accumulator(&in);
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t ii = 0; ii < inner; ++ii) {
                const std::int64_t base = o * n * inner + ii;
                T dot = T(0);
                for (std::int64_t k = 0; k < n; ++k) {
                    const std::size_t idx = static_cast<std::size_t>(base + k * inner);
                    dot += g[idx] * self.value[idx];
                }
                for (std::int64_t k = 0; k < n; ++k) {
                    const std::size_t idx = static_cast<std::size_t>(base + k * inner);
                    acc[idx] += self.value[idx] * (g[idx] - dot);
                }
            }
        }
    };
    return detail::make_op("softmax", x.shape(), std::move(out), {x}, bw);
}

// Numerically stable log(softmax(x)) along `axis` (log-sum-exp trick).
template <class T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis) {
    detail::require(axis >= 0 && axis < x.rank(), "log_softmax",
                    "axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    std::int64_t outer, n, inner;
    detail::axis_split(x.shape(), axis, outer, n, inner);
    std::vector<T> out(x.values().size());
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            T mx = x.data()[base];
            for (std::int64_t k = 1; k < n; ++k) mx = std::max(mx, x.data()[base + k * inner]);
            T sum = T(0);
            for (std::int64_t k = 0; k < n; ++k) sum += std::exp(x.data()[base + k * inner] - mx);
            const T lse = mx + std::log(sum);
            for (std::int64_t k = 0; k < n; ++k) {
                out[static_cast<std::size_t>(base + k * inner)] = x.data()[base + k * inner] - lse;
            }
        }
    }
    auto bw = [axis](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        std::int64_t outer, n, inner;
        detail::axis_split(self.shape, axis, outer, n, inner);
        auto& acc = gs.accumulator(&in);
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t ii = 0; ii < inner; ++ii) {
                const std::int64_t base = o * n * inner + ii;
                T gsum = T(0);
                for (std::int64_t k = 0; k < n; ++k) gsum += g[static_cast<std::size_t>(base + k * inner)];
                for (std::int64_t k = 0; k < n; ++k) {
                    const std::size_t idx = static_cast<std::size_t>(base + k * inner);
                    acc[idx] += g[idx] - std::exp(self.value[idx]) * gsum;
                }
            }
        }
    };
    return detail::make_op("log_softmax", x.shape(), std::move(out), {x}, bw);
}

// --- structural ops -----------------------------------------------------------

template <class T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
    detail::require(x.rank() == 4, "upsample_nearest2x",
                    "input must be 4-D [N,C,H,W], got " + shape_str(x.shape()));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<T> out(static_cast<std::size_t>(N) * C * 4 * H * W);
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
        const T* src = x.data() + nc * H * W;
        T* dst = out.data() + nc * 4 * H * W;
        for (int y = 0; y < H; ++y) {
            for (int x2 = 0; x2 < W; ++x2) {
                const T v = src[static_cast<std::int64_t>(y) * W + x2];
                T* d = dst + (static_cast<std::int64_t>(2 * y) * 2 * W + 2 * x2);
                d[0] = v;
                d[1] = v;
                d[2 * W] = v;
                d[2 * W + 1] = v;
            }
        }
    }
    auto bw = [](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        const int H = in.shape[2], W = in.shape[3];
        auto& acc = gs.accumulator(&in);
        for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(in.shape[0]) * in.shape[1]; ++nc) {
            const T* gp = g.data() + nc * 4 * H * W;
            T* a = acc.data() + nc * H * W;
            for (int y = 0; y < H; ++y) {
                for (int x2 = 0; x2 < W; ++x2) {
                    const T* s = gp + (static_cast<std::int64_t>(2 * y) * 2 * W + 2 * x2);
                    a[static_cast<std::int64_t>(y) * W + x2] += s[0] + s[1] + s[2 * W] + s[2 * W + 1];
                }
            }
        }
    };
    return detail::make_op("upsample_nearest2x", {N, C, 2 * H, 2 * W}, std::move(out), {x}, bw);
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    using detail::require;
    require(a.rank() == 4 && b.rank() == 4, "concat_channels", "inputs must be 4-D [N,C,H,W]");
    require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3), "concat_channels",
            "batch/spatial mismatch (axes 0,2,3): " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    std::vector<T> out(static_cast<std::size_t>(N) * (Ca + Cb) * hw);
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.data() + static_cast<std::int64_t>(n) * Ca * hw, Ca * hw,
                    out.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * hw);
        std::copy_n(b.data() + static_cast<std::int64_t>(n) * Cb * hw, Cb * hw,
                    out.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * hw + Ca * hw);
    }
    auto bw = [](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& a = *self.parents[0];
        const auto& b = *self.parents[1];
        const int N = a.shape[0], Ca = a.shape[1], Cb = b.shape[1];
        const std::int64_t hw = static_cast<std::int64_t>(a.shape[2]) * a.shape[3];
        for (int n = 0; n < N; ++n) {
            const T* gn = g.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * hw;
            if (a.requires_grad) {
                auto& acc = gs.accumulator(&a);
                T* dst = acc.data() + static_cast<std::int64_t>(n) * Ca * hw;
                for (std::int64_t i = 0; i < Ca * hw; ++i) dst[i] += gn[i];
            }
            if (b.requires_grad) {
                auto& acc = gs.accumulator(&b);
                T* dst = acc.data() + static_cast<std::int64_t>(n) * Cb * hw;
                for (std::int64_t i = 0; i < Cb * hw; ++i) dst[i] += gn[Ca * hw + i];
            }
        }
    };
    return detail::make_op("concat_channels", {N, Ca + Cb, H, W}, std::move(out), {a, b}, bw);
}

// Channels [c0, c1) of a 4-D tensor.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
    using detail::require;
    require(x.rank() == 4, "slice_channels", "input must be 4-D [N,C,H,W]");
    require(0 <= c0 && c0 < c1 && c1 <= x.dim(1), "slice_channels",
            "channel range [" + std::to_string(c0) + "," + std::to_string(c1) + ") invalid for C=" +
                std::to_string(x.dim(1)) + " (axis 1)");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cs = c1 - c0;
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    std::vector<T> out(static_cast<std::size_t>(N) * Cs * hw);
    for (int n = 0; n < N; ++n) {
        std::copy_n(x.data() + (static_cast<std::int64_t>(n) * C + c0) * hw, Cs * hw,
                    out.data() + static_cast<std::int64_t>(n) * Cs * hw);
    }
    auto bw = [c0, Cs](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        const int N = in.shape[0], C = in.shape[1];
        const std::int64_t hw = static_cast<std::int64_t>(in.shape[2]) * in.shape[3];
        auto& acc = gs.accumulator(&in);
        for (int n = 0; n < N; ++n) {
            T* dst = acc.data() + (static_cast<std::int64_t>(n) * C + c0) * hw;
            const T* src = g.data() + static_cast<std::int64_t>(n) * Cs * hw;
            for (std::int64_t i = 0; i < Cs * hw; ++i) dst[i] += src[i];
        }
    };
    return detail::make_op("slice_channels", {N, Cs, H, W}, std::move(out), {x}, bw);
}

// Concatenates along axis 0; trailing dims must agree.
template <class T>
Tensor<T> concat_batch(const std::vector<Tensor<T>>& xs) {
    detail::require(!xs.empty(), "concat_batch", "need at least one input");
    const auto& s0 = xs[0].shape();
    int total = 0;
    std::size_t count = 0;
    for (const auto& x : xs) {
        detail::require(x.rank() == static_cast<int>(s0.size()), "concat_batch", "rank mismatch");
        for (std::size_t i = 1; i < s0.size(); ++i) {
            detail::require(x.shape()[i] == s0[i], "concat_batch",
                            "trailing dim mismatch at axis " + std::to_string(i));
        }
        total += x.dim(0);
        count += x.values().size();
    }
    std::vector<T> out;
    out.reserve(count);
    for (const auto& x : xs) out.insert(out.end(), x.values().begin(), x.values().end());
    std::vector<int> shape = s0;
    shape[0] = total;
    auto bw = [](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        std::int64_t off = 0;
        for (const auto& p : self.parents) {
            const std::int64_t n = static_cast<std::int64_t>(p->value.size());
            if (p->requires_grad) {
                auto& acc = gs.accumulator(p.get());
                for (std::int64_t i = 0; i < n; ++i) acc[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(off + i)];
            }
            off += n;
        }
    };
    return detail::make_op("concat_batch", std::move(shape), std::move(out), xs, bw);
}

template <class T>
Tensor<T> concat_batch(std::initializer_list<Tensor<T>> xs) {
    return concat_batch(std::vector<Tensor<T>>(xs));
}

// Row `r` of a 2-D tensor as a 1-D tensor.
template <class T>
Tensor<T> select_row(const Tensor<T>& x, int r) {
    detail::require(x.rank() == 2, "select_row", "input must be 2-D, got " + shape_str(x.shape()));
    detail::require(0 <= r && r < x.dim(0), "select_row",
                    "row " + std::to_string(r) + " out of range for " + shape_str(x.shape()));
    const int C = x.dim(1);
    std::vector<T> out(x.data() + static_cast<std::int64_t>(r) * C,
                       x.data() + static_cast<std::int64_t>(r + 1) * C);
    auto bw = [r](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        const int C = in.shape[1];
        auto& acc = gs.accumulator(&in);
        for (int i = 0; i < C; ++i) acc[static_cast<std::size_t>(static_cast<std::int64_t>(r) * C + i)] += g[static_cast<std::size_t>(i)];
    };
    return detail::make_op("select_row", {C}, std::move(out), {x}, bw);
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> shape) {
    detail::require(shape_numel(shape) == x.numel(), "reshape",
                    "new shape " + shape_str(shape) + " incompatible with " + shape_str(x.shape()));
    std::vector<T> out(x.values());
    auto bw = [](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        auto& acc = gs.accumulator(&in);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    };
    return detail::make_op("reshape", std::move(shape), std::move(out), {x}, bw);
}

// --- gather / elementwise -----------------------------------------------------

// out[i] = x.flat[idx[i]]; backward scatter-adds (duplicate indices accumulate).
template <class T>
Tensor<T> gather(const Tensor<T>& x, const std::vector<std::int64_t>& idx) {
    const std::int64_t n = x.numel();
    std::vector<T> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= n) {
            throw DimensionError("gather: index " + std::to_string(idx[i]) + " out of range for numel " +
                                 std::to_string(n));
        }
        out[i] = x.data()[idx[i]];
    }
    auto bw = [idx](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        auto& acc = gs.accumulator(&in);
        for (std::size_t i = 0; i < g.size(); ++i) acc[static_cast<std::size_t>(idx[i])] += g[i];
    };
    return detail::make_op("gather", {static_cast<int>(idx.size())}, std::move(out), {x}, bw);
}

// Clamp with zero gradient outside [lo, hi].
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
    std::vector<T> out(x.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, x.data()[i]));
    auto bw = [lo, hi](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        auto& acc = gs.accumulator(&in);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T v = in.value[i];
            if (v >= lo && v <= hi) acc[i] += g[i];
        }
    };
    return detail::make_op("clamp", x.shape(), std::move(out), {x}, bw);
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
    std::vector<T> out(x.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(x.data()[i]);
    auto bw = [](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        auto& acc = gs.accumulator(&in);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] / in.value[i];
    };
    return detail::make_op("log", x.shape(), std::move(out), {x}, bw);
}

namespace detail {

template <class T, class Fwd, class Bwd>
Tensor<T> binary_elementwise(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd f, Bwd bw) {
    require(a.shape() == b.shape(), name,
            "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i], b.data()[i]);
    return make_op<T>(name, a.shape(), std::move(out), {a, b}, bw);
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    auto bw = [](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        for (int k = 0; k < 2; ++k) {
            const auto& p = *self.parents[static_cast<std::size_t>(k)];
            if (!p.requires_grad) continue;
            auto& acc = gs.accumulator(&p);
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        }
    };
    return detail::binary_elementwise<T>("add", a, b, [](T x, T y) { return x + y; }, bw);
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    auto bw = [](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& pa = *self.parents[0];
        const auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& acc = gs.accumulator(&pa);
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        }
        if (pb.requires_grad) {
            auto& acc = gs.accumulator(&pb);
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] -= g[i];
        }
    };
    return detail::binary_elementwise<T>("sub", a, b, [](T x, T y) { return x - y; }, bw);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    auto bw = [](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& pa = *self.parents[0];
        const auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& acc = gs.accumulator(&pa);
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            auto& acc = gs.accumulator(&pb);
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * pa.value[i];
        }
    };
    return detail::binary_elementwise<T>("mul", a, b, [](T x, T y) { return x * y; }, bw);
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    std::vector<T> out(x.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + c;
    auto bw = [](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        auto& acc = gs.accumulator(&in);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    };
    return detail::make_op("add_scalar", x.shape(), std::move(out), {x}, bw);
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
    std::vector<T> out(x.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
    auto bw = [c](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        auto& acc = gs.accumulator(&in);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * c;
    };
    return detail::make_op("mul_scalar", x.shape(), std::move(out), {x}, bw);
}

// Full reduction to a scalar tensor of shape [1].
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = T(0);
    for (const T& v : x.values()) s += v;
    auto bw = [](const TensorNode<T>& self, const std::vector<T>& g, Gradients<T>& gs) {
        const auto& in = *self.parents[0];
        if (!in.requires_grad) return;
        auto& acc = gs.accumulator(&in);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[0];
    };
    return detail::make_op("sum", {1}, std::vector<T>{s}, {x}, bw);
}

// --- optimizer ----------------------------------------------------------------

template <class T>
struct SgdState {
    std::unordered_map<const TensorNode<T>*, std::vector<T>> velocity;
};

// v <- m*v - lr*(g + wd*p); p <- p + v. Parameters with no recorded gradient
// (frozen or unused this step) are left untouched.
template <class T>
void sgd_step(std::vector<Parameter<T>>& params, const Gradients<T>& grads, SgdState<T>& state,
              T lr, T momentum, T weight_decay) {
    for (auto& p : params) {
        if (!p.tensor.requires_grad() || !grads.contains(p.tensor)) continue;
        const std::vector<T>& g = grads.at(p.tensor);
        auto& v = state.velocity[p.tensor.node().get()];
        if (v.empty()) v.assign(g.size(), T(0));
        T* pd = p.tensor.mutable_data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            v[i] = momentum * v[i] - lr * (g[i] + weight_decay * pd[i]);
            pd[i] += v[i];
        }
        check_finite("sgd_step", p.tensor.values());
    }
}

}  // namespace fsdm
