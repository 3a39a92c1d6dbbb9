#pragma once

#include <algorithm>
#include <vector>

namespace fsdm {

// Axis-aligned box, center + extent, pixel units. Pixel (i,j) spans
// [i,i+1)x[j,j+1), so a box flush with the image has x1 = 0.
struct Box {
    double cx = 0, cy = 0, w = 0, h = 0;

    double x1() const { return cx - w / 2; }
    double y1() const { return cy - h / 2; }
    double x2() const { return cx + w / 2; }
    double y2() const { return cy + h / 2; }
    double area() const { return w * h; }
};

inline double iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
    const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

struct BoxAnnotation {
    double cx = 0, cy = 0, w = 0, h = 0;
    int category_id = -1;

    Box box() const { return {cx, cy, w, h}; }
};

struct Detection {
    Box box;
    double objectness = 0;                // P_o
    std::vector<double> class_probs;      // simplex over the active categories
    int category_id = -1;                 // argmax category
    double score = 0;                     // P_o * max class prob
};

}  // namespace fsdm
