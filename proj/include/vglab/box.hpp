#pragma once

// Bounding boxes in normalized coordinates, IoU/GIoU, and the L1 distance
// shared by the matching cost and the regression loss. Pure functions, safe
// for concurrent use.

#include <array>

namespace vg {

struct BoxXyXy;

// center-x / center-y / width / height, normalized to [0,1]
struct BoxCxCyWh {
  double cx = 0, cy = 0, w = 0, h = 0;
  BoxXyXy to_xyxy() const;
};

struct BoxXyXy {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  BoxCxCyWh to_cxcywh() const;
  double area() const { return (x2 - x1) * (y2 - y1); }
};

// Intersection over union; 0 for disjoint boxes and whenever the union has
// zero area (degenerate boxes never match anything).
double iou(const BoxXyXy& a, const BoxXyXy& b);

// iou - (enclosing - union) / enclosing, in [-1, 1]
double giou(const BoxXyXy& a, const BoxXyXy& b);

// sum of absolute coordinate differences in cxcywh form
double l1_box(const BoxCxCyWh& a, const BoxCxCyWh& b);

}  // namespace vg
