#include "cfun/box.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cfun/error.hpp"

namespace cfun {

double BBox3D::size(int axis) const { return hi(axis) - lo(axis); }

BBox3D BBox3D::from_center(double cz, double cy, double cx, double sd, double sh, double sw) {
  return {cz - 0.5 * sd, cy - 0.5 * sh, cx - 0.5 * sw, cz + 0.5 * sd, cy + 0.5 * sh, cx + 0.5 * sw};
}

std::string BBox3D::str() const {
  std::ostringstream os;
  os << "[" << z1 << "," << y1 << "," << x1 << "," << z2 << "," << y2 << "," << x2 << "]";
  return os.str();
}

double iou_3d(const BBox3D& a, const BBox3D& b) {
  double inter = 1.0;
  for (int ax = 0; ax < 3; ++ax) {
    const double len = std::min(a.hi(ax), b.hi(ax)) - std::max(a.lo(ax), b.lo(ax));
    if (len <= 0.0) return 0.0;
    inter *= len;
  }
  const double uni = a.volume() + b.volume() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

BoxDelta encode_box(const BBox3D& anchor, const BBox3D& gt) {
  BoxDelta d;
  for (int ax = 0; ax < 3; ++ax) {
    const double sa = anchor.size(ax);
    const double sg = gt.size(ax);
    if (!(sa > 0.0)) throw ShapeError("encode_box: anchor has non-positive size");
    if (!(sg > 0.0)) throw ShapeError("encode_box: target has non-positive size");
    d[ax] = (gt.center(ax) - anchor.center(ax)) / sa;
    d[ax + 3] = std::log(sg / sa);
  }
  return d;
}

BBox3D decode_box(const BBox3D& anchor, const BoxDelta& delta) {
  // Keep exp() finite for wild early-training predictions.
  constexpr double kMaxLog = 4.0;
  std::array<double, 6> out{};
  for (int ax = 0; ax < 3; ++ax) {
    const double sa = anchor.size(ax);
    const double c = anchor.center(ax) + delta[ax] * sa;
    const double s = sa * std::exp(std::min(delta[ax + 3], kMaxLog));
    out[static_cast<std::size_t>(ax)] = c - 0.5 * s;
    out[static_cast<std::size_t>(ax) + 3] = c + 0.5 * s;
  }
  return BBox3D::from_array(out);
}

BBox3D clip_box(const BBox3D& box, Shape3 extent) {
  auto a = box.as_array();
  for (int ax = 0; ax < 3; ++ax) {
    const double n = extent[ax];
    a[static_cast<std::size_t>(ax)] = std::clamp(a[static_cast<std::size_t>(ax)], 0.0, n);
    a[static_cast<std::size_t>(ax) + 3] = std::clamp(a[static_cast<std::size_t>(ax) + 3], 0.0, n);
  }
  return BBox3D::from_array(a);
}

BBox3D expand_box(const BBox3D& box, double fraction) {
  auto a = box.as_array();
  for (int ax = 0; ax < 3; ++ax) {
    const double g = fraction * box.size(ax);
    a[static_cast<std::size_t>(ax)] -= g;
    a[static_cast<std::size_t>(ax) + 3] += g;
  }
  return BBox3D::from_array(a);
}

BBox3D fit_box(const BBox3D& box, double min_side, Shape3 extent) {
  if (!(min_side > 0.0) || min_side > std::min({extent.d, extent.h, extent.w}))
    throw ShapeError("fit_box: min_side must lie in (0, smallest extent]");
  auto a = box.as_array();
  for (int ax = 0; ax < 3; ++ax) {
    const auto lo = static_cast<std::size_t>(ax);
    const auto hi = lo + 3;
    const double n = extent[ax];
    double side = std::max(a[hi] - a[lo], min_side);
    side = std::min(side, n);
    double start = std::clamp(0.5 * (a[lo] + a[hi]) - 0.5 * side, 0.0, n - side);
    a[lo] = start;
    a[hi] = start + side;
  }
  return BBox3D::from_array(a);
}

}  // namespace cfun
