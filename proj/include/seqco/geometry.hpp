#pragma once

// Normalized (cx, cy, w, h) boxes, IoU / generalized IoU, and the combined
// L1 + GIoU regression distance used by matching costs and the box loss.

#include <algorithm>
#include <cmath>

#include "seqco/tensor.hpp"

namespace seqco {

struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;

  double x1() const { return std::clamp(cx - w / 2, 0.0, 1.0); }
  double y1() const { return std::clamp(cy - h / 2, 0.0, 1.0); }
  double x2() const { return std::clamp(cx + w / 2, 0.0, 1.0); }
  double y2() const { return std::clamp(cy + h / 2, 0.0, 1.0); }
  double area() const { return std::max(0.0, x2() - x1()) * std::max(0.0, y2() - y1()); }

  bool operator==(const Box& o) const = default;
};

// GIoU weight inside the combined box distance; with the matching weight of 5
// this yields the DDETR-convention 5*L1 + 2*(1-GIoU) split.
inline constexpr double kGiouSubWeight = 0.4;

inline double iou(const Box& a, const Box& b) {
  double ix1 = std::max(a.x1(), b.x1());
  double iy1 = std::max(a.y1(), b.y1());
  double ix2 = std::min(a.x2(), b.x2());
  double iy2 = std::min(a.y2(), b.y2());
  double inter = std::max(0.0, ix2 - ix1) * std::max(0.0, iy2 - iy1);
  double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

inline double giou(const Box& a, const Box& b) {
  double ix1 = std::max(a.x1(), b.x1());
  double iy1 = std::max(a.y1(), b.y1());
  double ix2 = std::min(a.x2(), b.x2());
  double iy2 = std::min(a.y2(), b.y2());
  double inter = std::max(0.0, ix2 - ix1) * std::max(0.0, iy2 - iy1);
  double uni = a.area() + b.area() - inter;
  double cx1 = std::min(a.x1(), b.x1());
  double cy1 = std::min(a.y1(), b.y1());
  double cx2 = std::max(a.x2(), b.x2());
  double cy2 = std::max(a.y2(), b.y2());
  double hull = (cx2 - cx1) * (cy2 - cy1);
  double i = uni > 0.0 ? inter / uni : 0.0;
  if (hull <= 0.0) return i;
  return i - (hull - uni) / hull;
}

inline double l1_distance(const Box& a, const Box& b) {
  return std::fabs(a.cx - b.cx) + std::fabs(a.cy - b.cy) + std::fabs(a.w - b.w) + std::fabs(a.h - b.h);
}

// L_box = L1 + 0.4 * (1 - GIoU)
inline double box_distance(const Box& a, const Box& b) {
  return l1_distance(a, b) + kGiouSubWeight * (1.0 - giou(a, b));
}

// --- differentiable lift: GIoU of predicted [M,4] cxcywh rows against
// constant target rows, returning a [M] tensor ---
template <class T>
Tensor<T> giou_rows(const Tensor<T>& pred, const Tensor<T>& target) {
  auto corners = [](const Tensor<T>& b) {
    auto cx = slice(b, 1, 0, 1);
    auto cy = slice(b, 1, 1, 1);
    auto w = slice(b, 1, 2, 1);
    auto h = slice(b, 1, 3, 1);
    auto half_w = mul_scalar(w, T(0.5));
    auto half_h = mul_scalar(h, T(0.5));
    auto x1 = clamp(sub(cx, half_w), T(0), T(1));
    auto y1 = clamp(sub(cy, half_h), T(0), T(1));
    auto x2 = clamp(add(cx, half_w), T(0), T(1));
    auto y2 = clamp(add(cy, half_h), T(0), T(1));
    return std::array<Tensor<T>, 4>{x1, y1, x2, y2};
  };
  auto [ax1, ay1, ax2, ay2] = corners(pred);
  auto [bx1, by1, bx2, by2] = corners(target);
  auto zero = Tensor<T>::scalar(T(0));
  auto iw = maximum(sub(minimum(ax2, bx2), maximum(ax1, bx1)), zero);
  auto ih = maximum(sub(minimum(ay2, by2), maximum(ay1, by1)), zero);
  auto inter = mul(iw, ih);
  auto area_a = mul(maximum(sub(ax2, ax1), zero), maximum(sub(ay2, ay1), zero));
  auto area_b = mul(maximum(sub(bx2, bx1), zero), maximum(sub(by2, by1), zero));
  auto uni = sub(add(area_a, area_b), inter);
  const T eps = T(1e-9);
  auto i = div(inter, add_scalar(uni, eps));
  auto hull = mul(sub(maximum(ax2, bx2), minimum(ax1, bx1)), sub(maximum(ay2, by2), minimum(ay1, by1)));
  auto g = sub(i, div(sub(hull, uni), add_scalar(hull, eps)));
  return reshape(g, {pred.dim(0)});
}

}  // namespace seqco
