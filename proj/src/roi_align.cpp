#include "cfun/roi_align.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "cfun/error.hpp"

namespace cfun {

void RoiAlignSpec::validate() const {
  if (out_size.d < 1 || out_size.h < 1 || out_size.w < 1) throw ShapeError("roi_align out dims must be >= 1");
  if (samples_per_bin < 1) throw ShapeError("samples_per_bin must be >= 1");
}

namespace {

// Row i of a sparse (n_out x n_src) interpolation matrix for one axis.
using SparseRow = std::vector<std::pair<int, float>>;
using SparseAxis = std::vector<SparseRow>;

// Averaging the per-sample trilinear weights over a tensor-product sample grid
// factorizes per axis, so the whole op is three sparse 1-D maps.
SparseAxis axis_weights(double lo, double hi, int n_src, int n_out, int samples) {
  const double bin = (hi - lo) / n_out;
  SparseAxis rows(static_cast<std::size_t>(n_out));
  for (int i = 0; i < n_out; ++i) {
    std::map<int, double> acc;
    for (int s = 0; s < samples; ++s) {
      const double p = lo + bin * (i + (s + 0.5) / samples);
      const double q = std::clamp(p - 0.5, 0.0, static_cast<double>(n_src - 1));
      const int i0 = std::min(static_cast<int>(std::floor(q)), std::max(0, n_src - 2));
      const int i1 = std::min(i0 + 1, n_src - 1);
      const double f = q - i0;
      acc[i0] += (1.0 - f) / samples;
      if (f > 0.0) acc[i1] += f / samples;
    }
    for (const auto& [k, w] : acc) rows[static_cast<std::size_t>(i)].emplace_back(k, static_cast<float>(w));
  }
  return rows;
}

struct RoiPlan {
  SparseAxis z, y, x;
  Shape3 src;
  Shape3 out;
};

RoiPlan plan(const Tensor& src, const BBox3D& box, const RoiAlignSpec& spec) {
  spec.validate();
  const Shape3 s = src.spatial();
  const BBox3D b = clip_box(box, s);
  for (int ax = 0; ax < 3; ++ax)
    if (!(b.size(ax) >= 1.0)) throw ShapeError("roi_align: degenerate box " + box.str() + " after clipping");
  return {axis_weights(b.z1, b.z2, s.d, spec.out_size.d, spec.samples_per_bin),
          axis_weights(b.y1, b.y2, s.h, spec.out_size.h, spec.samples_per_bin),
          axis_weights(b.x1, b.x2, s.w, spec.out_size.w, spec.samples_per_bin), s, spec.out_size};
}

// Applies `rows` along `axis`, or its transpose when `adjoint` is set.
Tensor apply_axis(const Tensor& t, int axis, const SparseAxis& rows, int n_dst, bool adjoint) {
  const Shape3 s = t.spatial();
  Shape3 o = s;
  (axis == 0 ? o.d : axis == 1 ? o.h : o.w) = n_dst;
  Tensor out(t.channels(), o);
  const std::size_t outer = static_cast<std::size_t>(t.channels()) * (axis >= 1 ? s.d : 1) * (axis == 2 ? s.h : 1);
  const std::size_t inner = axis == 0 ? static_cast<std::size_t>(s.h) * s.w : (axis == 1 ? static_cast<std::size_t>(s.w) : 1);
  const int n_src = s[axis];
  for (std::size_t q = 0; q < outer; ++q) {
    const float* sp = t.data() + q * static_cast<std::size_t>(n_src) * inner;
    float* dp = out.data() + q * static_cast<std::size_t>(n_dst) * inner;
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (const auto& [k, w] : rows[i]) {
        // forward: dst[i] += w * src[k]; adjoint: dst[k] += w * src[i]
        const float* a = sp + (adjoint ? i : static_cast<std::size_t>(k)) * inner;
        float* d = dp + (adjoint ? static_cast<std::size_t>(k) : i) * inner;
        for (std::size_t j = 0; j < inner; ++j) d[j] += w * a[j];
      }
  }
  return out;
}

Tensor forward(const Tensor& src, const RoiPlan& p) {
  Tensor t = apply_axis(src, 2, p.x, p.out.w, false);
  t = apply_axis(t, 1, p.y, p.out.h, false);
  return apply_axis(t, 0, p.z, p.out.d, false);
}

}  // namespace

Tensor roi_align(const Tensor& src, const BBox3D& box, const RoiAlignSpec& spec) {
  return forward(src, plan(src, box, spec));
}

ag::Var roi_align(const ag::Var& src, const BBox3D& box, const RoiAlignSpec& spec) {
  auto p = plan(src->value, box, spec);
  Tensor y = forward(src->value, p);
  return ag::make_result(std::move(y), {src}, [p = std::move(p)](ag::Node& self) {
    Tensor g = apply_axis(self.grad, 0, p.z, p.src.d, true);
    g = apply_axis(g, 1, p.y, p.src.h, true);
    g = apply_axis(g, 2, p.x, p.src.w, true);
    Tensor& dx = self.parents[0]->grad_ref();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
  });
}

}  // namespace cfun
