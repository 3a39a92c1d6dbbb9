#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fsdm/box.hpp"
#include "fsdm/errors.hpp"
#include "fsdm/tensor.hpp"

namespace fsdm::data {

// One annotated image: [3,H,W] float tensor in [0,1] plus box labels in
// pixel units of that tensor.
struct ImageSample {
    std::string id;
    Tensor<float> image;
    std::vector<BoxAnnotation> boxes;

    int height() const { return image.dim(1); }
    int width() const { return image.dim(2); }
};

inline Tensor<float> tensor_from_rgb8(const std::vector<unsigned char>& rgb, int width,
                                      int height) {
    if (rgb.size() != static_cast<size_t>(width) * height * 3) {
        throw DimensionError("tensor_from_rgb8: buffer holds " + std::to_string(rgb.size()) +
                             " bytes, expected " + std::to_string(size_t(width) * height * 3));
    }
    std::vector<float> v(static_cast<size_t>(3) * height * width);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            for (int c = 0; c < 3; ++c) {
                v[(static_cast<size_t>(c) * height + y) * width + x] =
                    static_cast<float>(rgb[(static_cast<size_t>(y) * width + x) * 3 + c]) / 255.0f;
            }
        }
    }
    return Tensor<float>::from_data({3, height, width}, std::move(v));
}

inline std::vector<unsigned char> rgb8_from_tensor(const Tensor<float>& image) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw DimensionError("rgb8_from_tensor: expected [3,H,W], got " +
                             shape_str(image.shape()));
    }
    const int h = image.dim(1), w = image.dim(2);
    const float* src = image.data();
    std::vector<unsigned char> rgb(static_cast<size_t>(w) * h * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                float v = std::clamp(src[(static_cast<size_t>(c) * h + y) * w + x], 0.0f, 1.0f);
                rgb[(static_cast<size_t>(y) * w + x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0f));
            }
        }
    }
    return rgb;
}

// Bilinear resize of a [C,H,W] tensor; sample positions use the half-pixel
// center convention. Detached from any autodiff graph.
inline Tensor<float> resize_bilinear(const Tensor<float>& image, int out_h, int out_w) {
    if (image.rank() != 3) {
        throw DimensionError("resize_bilinear: expected [C,H,W], got " +
                             shape_str(image.shape()));
    }
    if (out_h <= 0 || out_w <= 0) {
        throw UsageError("resize_bilinear: non-positive target " + std::to_string(out_h) + "x" +
                         std::to_string(out_w));
    }
    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (out_h == h && out_w == w) {
        return Tensor<float>::from_data(image.shape(), image.values());
    }
    const float sy = static_cast<float>(h) / out_h;
    const float sx = static_cast<float>(w) / out_w;
    const float* src = image.data();
    std::vector<float> out(static_cast<size_t>(c) * out_h * out_w);
    for (int oy = 0; oy < out_h; ++oy) {
        float fy = (oy + 0.5f) * sy - 0.5f;
        int y0 = static_cast<int>(std::floor(fy));
        float wy = fy - y0;
        int y0c = std::clamp(y0, 0, h - 1), y1c = std::clamp(y0 + 1, 0, h - 1);
        for (int ox = 0; ox < out_w; ++ox) {
            float fx = (ox + 0.5f) * sx - 0.5f;
            int x0 = static_cast<int>(std::floor(fx));
            float wx = fx - x0;
            int x0c = std::clamp(x0, 0, w - 1), x1c = std::clamp(x0 + 1, 0, w - 1);
            for (int ch = 0; ch < c; ++ch) {
                const float* plane = src + static_cast<size_t>(ch) * h * w;
                float top = plane[y0c * w + x0c] * (1 - wx) + plane[y0c * w + x1c] * wx;
                float bot = plane[y1c * w + x0c] * (1 - wx) + plane[y1c * w + x1c] * wx;
                out[(static_cast<size_t>(ch) * out_h + oy) * out_w + ox] =
                    top * (1 - wy) + bot * wy;
            }
        }
    }
    return Tensor<float>::from_data({c, out_h, out_w}, std::move(out));
}

// Resizes image and box coordinates together (boxes scale proportionally).
inline ImageSample resize_sample(const ImageSample& sample, int out_h, int out_w) {
    ImageSample r;
    r.id = sample.id;
    const double sy = static_cast<double>(out_h) / sample.height();
    const double sx = static_cast<double>(out_w) / sample.width();
    r.image = resize_bilinear(sample.image, out_h, out_w);
    r.boxes = sample.boxes;
    for (auto& b : r.boxes) {
        b.cx *= sx;
        b.w *= sx;
        b.cy *= sy;
        b.h *= sy;
    }
    return r;
}

// 1px rectangle outline, clipped to the image. Used by detection dumps.
inline void draw_box_outline(std::vector<unsigned char>& rgb, int width, int height,
                             const Box& box, unsigned char r, unsigned char g, unsigned char b) {
    int x1 = std::clamp(static_cast<int>(std::lround(box.x1())), 0, width - 1);
    int x2 = std::clamp(static_cast<int>(std::lround(box.x2())) - 1, 0, width - 1);
    int y1 = std::clamp(static_cast<int>(std::lround(box.y1())), 0, height - 1);
    int y2 = std::clamp(static_cast<int>(std::lround(box.y2())) - 1, 0, height - 1);
    auto put = [&](int x, int y) {
        size_t p = (static_cast<size_t>(y) * width + x) * 3;
        rgb[p] = r;
        rgb[p + 1] = g;
        rgb[p + 2] = b;
    };
    for (int x = x1; x <= x2; ++x) {
        put(x, y1);
        put(x, y2);
    }
    for (int y = y1; y <= y2; ++y) {
        put(x1, y);
        put(x2, y);
    }
}

}  // namespace fsdm::data
