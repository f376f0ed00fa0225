#pragma once

#include <array>
#include <string>

#include "cfun/tensor.hpp"

namespace cfun {

/// Axis-aligned box in continuous voxel coordinates, half-open on the max side.
/// Voxel i covers [i, i+1) with its center at i + 0.5.
struct BBox3D {
  double z1 = 0, y1 = 0, x1 = 0;
  double z2 = 1, y2 = 1, x2 = 1;

  [[nodiscard]] double size(int axis) const;
  [[nodiscard]] double lo(int axis) const { return axis == 0 ? z1 : (axis == 1 ? y1 : x1); }
  [[nodiscard]] double hi(int axis) const { return axis == 0 ? z2 : (axis == 1 ? y2 : x2); }
  [[nodiscard]] double center(int axis) const { return 0.5 * (lo(axis) + hi(axis)); }
  [[nodiscard]] double volume() const { return size(0) * size(1) * size(2); }
  [[nodiscard]] bool valid() const { return z1 < z2 && y1 < y2 && x1 < x2; }
  [[nodiscard]] std::array<double, 6> as_array() const { return {z1, y1, x1, z2, y2, x2}; }
  static BBox3D from_array(const std::array<double, 6>& a) { return {a[0], a[1], a[2], a[3], a[4], a[5]}; }
  static BBox3D from_center(double cz, double cy, double cx, double sd, double sh, double sw);
  [[nodiscard]] std::string str() const;

  friend bool operator==(const BBox3D&, const BBox3D&) = default;
};

/// Center offsets normalized by the reference box size, then log size ratios.
struct BoxDelta {
  std::array<double, 6> v{};  // dz, dy, dx, dd, dh, dw
  double& operator[](int i) { return v[static_cast<std::size_t>(i)]; }
  double operator[](int i) const { return v[static_cast<std::size_t>(i)]; }
};

double iou_3d(const BBox3D& a, const BBox3D& b);
BoxDelta encode_box(const BBox3D& anchor, const BBox3D& gt);
BBox3D decode_box(const BBox3D& anchor, const BoxDelta& delta);
/// Clip to [0, extent] per axis. May produce an invalid (empty) box.
BBox3D clip_box(const BBox3D& box, Shape3 extent);
/// Grow each side by `fraction` of the box size along that axis.
BBox3D expand_box(const BBox3D& box, double fraction);
/// Grow every side to at least `min_side` around its center, then shift (and
/// finally clip) into [0, extent]. Requires min_side <= the smallest extent.
BBox3D fit_box(const BBox3D& box, double min_side, Shape3 extent);

}  // namespace cfun
