#include "vglab/box.hpp"

#include <algorithm>
#include <cmath>

namespace vg {

BoxXyXy BoxCxCyWh::to_xyxy() const {
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

BoxCxCyWh BoxXyXy::to_cxcywh() const {
  return {(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
}

double iou(const BoxXyXy& a, const BoxXyXy& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = std::max(0.0, iw) * std::max(0.0, ih);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

double giou(const BoxXyXy& a, const BoxXyXy& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = std::max(0.0, iw) * std::max(0.0, ih);
  const double uni = a.area() + b.area() - inter;
  const double ew = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double eh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double enclose = ew * eh;
  const double i = uni <= 0.0 ? 0.0 : inter / uni;
  if (enclose <= 0.0) return i;
  return i - (enclose - uni) / enclose;
}

double l1_box(const BoxCxCyWh& a, const BoxCxCyWh& b) {
  return std::fabs(a.cx - b.cx) + std::fabs(a.cy - b.cy) + std::fabs(a.w - b.w) +
         std::fabs(a.h - b.h);
}

}  // namespace vg
