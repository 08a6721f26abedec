#pragma once

#include <algorithm>
#include <string>

#include "dspe/error.hpp"

namespace dspe {

/// Axis-aligned box with real-valued corners, x1 < x2 and y1 < y2.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double area() const { return (x2 - x1) * (y2 - y1); }
  bool valid() const { return x1 < x2 && y1 < y2; }

  void validate() const {
    if (!valid()) {
      throw ConsistencyError("box (" + std::to_string(x1) + "," + std::to_string(y1) + "," +
                             std::to_string(x2) + "," + std::to_string(y2) +
                             ") has non-positive area");
    }
  }

  bool operator==(const Box&) const = default;
};

/// Intersection over union; 0 for disjoint boxes.
inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

}  // namespace dspe
