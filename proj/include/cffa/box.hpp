#pragma once

#include <algorithm>
#include <cstddef>

namespace cffa {

/// Axis-aligned box in pixel coordinates, x_min < x_max and y_min < y_max.
struct BBox {
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
    double cx() const { return 0.5 * (x_min + x_max); }
    double cy() const { return 0.5 * (y_min + y_max); }

    BBox clipped(double w, double h) const {
        return {std::clamp(x_min, 0.0, w), std::clamp(y_min, 0.0, h),
                std::clamp(x_max, 0.0, w), std::clamp(y_max, 0.0, h)};
    }
};

/// Intersection over union; 0 for disjoint boxes.
inline double iou(const BBox& a, const BBox& b) {
    const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni <= 0.0 ? 0.0 : inter / uni;
}

/// One scored class prediction. Background is never emitted as a Detection.
struct Detection {
    BBox box;
    std::size_t category = 0;
    double score = 0.0;
};

}  // namespace cffa
