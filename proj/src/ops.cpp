#include "cfun/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "cfun/error.hpp"
#include "cfun/volume.hpp"

namespace cfun::nn {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;
using StridedMap = Eigen::Map<MatRM, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const MatRM, 0, Eigen::OuterStride<>>;

// Upper bound on im2col scratch, in floats.
constexpr std::size_t kColumnBudget = std::size_t{1} << 17;

struct ConvDims {
  int cin = 0;   // channels on the "input" side of the forward convolution
  int cout = 0;  // channels on the "output" side
  Shape3 in;
  Shape3 out;
  int kvol = 0;
  [[nodiscard]] int k_rows() const { return cin * kvol; }
  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(out.h) * out.w; }
};

// Output rows (z, y pairs) per chunk so that the column matrix stays cache-sized.
int chunk_rows(const ConvDims& d) {
  const std::size_t per_row = static_cast<std::size_t>(d.k_rows()) * static_cast<std::size_t>(d.out.w);
  const std::size_t rows = static_cast<std::size_t>(d.out.d) * static_cast<std::size_t>(d.out.h);
  return static_cast<int>(std::clamp<std::size_t>(kColumnBudget / std::max<std::size_t>(per_row, 1), 1, rows));
}

struct AxisRange {
  int lo;
  int hi;
};

// Output indices o in [lo, hi) for which o*s - p + k lands inside [0, n).
AxisRange valid_range(int n, int n_out, int s, int p, int k) {
  int lo = 0;
  while (lo < n_out && lo * s - p + k < 0) ++lo;
  int hi = n_out;
  while (hi > lo && (hi - 1) * s - p + k >= n) --hi;
  return {lo, hi};
}

// Rows r in [r0, r1) index (oz, oy) = (r / out.h, r % out.h).
template <bool Accumulate>
void im2col_impl(std::conditional_t<Accumulate, float*, const float*> x, const ConvDims& d, const ConvGeometry& g,
                 int r0, int r1, std::conditional_t<Accumulate, const float*, float*> col) {
  const auto [kz, ky, kx] = g.kernel;
  const auto [sz, sy, sx] = g.stride;
  const auto [pz, py, px] = g.padding;
  const int wo = d.out.w;
  const std::size_t n = static_cast<std::size_t>(r1 - r0) * static_cast<std::size_t>(wo);
  for (int ci = 0; ci < d.cin; ++ci)
    for (int a = 0; a < kz; ++a)
      for (int b = 0; b < ky; ++b)
        for (int c = 0; c < kx; ++c) {
          const std::size_t row = static_cast<std::size_t>(((ci * kz + a) * ky + b) * kx + c);
          auto dst = col + row * n;
          const AxisRange rx = valid_range(d.in.w, d.out.w, sx, px, c);
          const AxisRange ry = valid_range(d.in.h, d.out.h, sy, py, b);
          for (int r = r0; r < r1; ++r) {
            const int oz = r / d.out.h;
            const int oy = r % d.out.h;
            const int iz = oz * sz - pz + a;
            auto line = dst + static_cast<std::size_t>(r - r0) * static_cast<std::size_t>(wo);
            if (iz < 0 || iz >= d.in.d || oy < ry.lo || oy >= ry.hi) {
              if constexpr (!Accumulate) std::fill(line, line + wo, 0.0f);
              continue;
            }
            const int iy = oy * sy - py + b;
            auto src = x + ((static_cast<std::size_t>(ci) * d.in.d + iz) * d.in.h + iy) * d.in.w;
            if constexpr (Accumulate) {
              for (int ox = rx.lo; ox < rx.hi; ++ox) src[ox * sx - px + c] += line[ox];
            } else {
              std::fill(line, line + rx.lo, 0.0f);
              if (sx == 1) {
                std::memcpy(line + rx.lo, src + (rx.lo - px + c),
                            sizeof(float) * static_cast<std::size_t>(std::max(0, rx.hi - rx.lo)));
              } else {
                for (int ox = rx.lo; ox < rx.hi; ++ox) line[ox] = src[ox * sx - px + c];
              }
              std::fill(line + std::max(rx.hi, rx.lo), line + wo, 0.0f);
            }
          }
        }
}

void im2col(const float* x, const ConvDims& d, const ConvGeometry& g, int r0, int r1, float* col) {
  im2col_impl<false>(x, d, g, r0, r1, col);
}

void col2im(const float* col, const ConvDims& d, const ConvGeometry& g, int r0, int r1, float* x) {
  im2col_impl<true>(x, d, g, r0, r1, col);
}

ConvDims conv_dims(const Tensor& x, const Tensor& w, const ConvGeometry& g, bool transposed) {
  if (x.rank() != 4) throw ShapeError("conv input must be (C,D,H,W), got " + x.shape_str());
  if (w.rank() != 5) throw ShapeError("conv weight must be rank 5, got " + w.shape_str());
  for (int a = 0; a < 3; ++a)
    if (w.dim(2 + a) != g.kernel[static_cast<std::size_t>(a)]) throw ShapeError("conv weight/kernel size mismatch");
  ConvDims d;
  d.kvol = g.kernel_volume();
  if (!transposed) {
    if (x.channels() != w.dim(1))
      throw ShapeError("conv3d: input has " + std::to_string(x.channels()) + " channels, weight expects " +
                       std::to_string(w.dim(1)));
    d.cin = w.dim(1);
    d.cout = w.dim(0);
    d.in = x.spatial();
    d.out = g.output(d.in);
  } else {
    if (x.channels() != w.dim(0))
      throw ShapeError("deconv3d: input has " + std::to_string(x.channels()) + " channels, weight expects " +
                       std::to_string(w.dim(0)));
    d.cin = w.dim(1);
    d.cout = w.dim(0);
    d.out = x.spatial();
    d.in = g.transposed_output(d.out);
    if (!(g.output(d.in) == d.out)) throw ShapeError("deconv3d: geometry is not invertible for this input");
  }
  if (d.out.d < 1 || d.out.h < 1 || d.out.w < 1 || d.in.d < 1 || d.in.h < 1 || d.in.w < 1)
    throw ShapeError("convolution produces an empty output");
  return d;
}

void add_bias(Tensor& y, const Tensor* bias) {
  if (!bias) return;
  if (static_cast<int>(bias->size()) != y.channels()) throw ShapeError("bias length does not match channels");
  const std::size_t m = y.channel_size();
  for (int c = 0; c < y.channels(); ++c) {
    float* p = y.channel(c);
    const float b = (*bias)[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < m; ++i) p[i] += b;
  }
}

void accumulate_bias_grad(const Tensor& dy, Tensor& db) {
  const std::size_t m = dy.channel_size();
  for (int c = 0; c < dy.channels(); ++c) {
    const float* p = dy.channel(c);
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += p[i];
    db[static_cast<std::size_t>(c)] += static_cast<float>(s);
  }
}

// y(cout, out) = W * col(x)
void conv_forward_into(const float* x, const float* w, const ConvDims& d, const ConvGeometry& g, float* y) {
  const std::size_t total = static_cast<std::size_t>(d.out.d) * d.plane();
  CMapRM wm(w, d.cout, d.k_rows());
  if (g.is_pointwise()) {
    MapRM(y, d.cout, static_cast<Eigen::Index>(total)).noalias() =
        wm * CMapRM(x, d.cin, static_cast<Eigen::Index>(total));
    return;
  }
  const int step = chunk_rows(d);
  const int rows = d.out.d * d.out.h;
  std::vector<float> col(static_cast<std::size_t>(d.k_rows()) * static_cast<std::size_t>(step) * d.out.w);
  for (int r0 = 0; r0 < rows; r0 += step) {
    const int r1 = std::min(rows, r0 + step);
    const auto n = static_cast<Eigen::Index>(static_cast<std::size_t>(r1 - r0) * d.out.w);
    im2col(x, d, g, r0, r1, col.data());
    StridedMap ym(y + static_cast<std::size_t>(r0) * d.out.w, d.cout, n, Eigen::OuterStride<>(static_cast<Eigen::Index>(total)));
    ym.noalias() = wm * MapRM(col.data(), d.k_rows(), n);
  }
}

// dx(cin, in) += col2im(W^T * dy)
void conv_backward_data(const float* dy, const float* w, const ConvDims& d, const ConvGeometry& g, float* dx) {
  const std::size_t total = static_cast<std::size_t>(d.out.d) * d.plane();
  CMapRM wm(w, d.cout, d.k_rows());
  if (g.is_pointwise()) {
    MapRM(dx, d.cin, static_cast<Eigen::Index>(total)).noalias() +=
        wm.transpose() * CMapRM(dy, d.cout, static_cast<Eigen::Index>(total));
    return;
  }
  const int step = chunk_rows(d);
  const int rows = d.out.d * d.out.h;
  std::vector<float> col(static_cast<std::size_t>(d.k_rows()) * static_cast<std::size_t>(step) * d.out.w);
  for (int r0 = 0; r0 < rows; r0 += step) {
    const int r1 = std::min(rows, r0 + step);
    const auto n = static_cast<Eigen::Index>(static_cast<std::size_t>(r1 - r0) * d.out.w);
    CStridedMap dym(dy + static_cast<std::size_t>(r0) * d.out.w, d.cout, n, Eigen::OuterStride<>(static_cast<Eigen::Index>(total)));
    MapRM(col.data(), d.k_rows(), n).noalias() = wm.transpose() * dym;
    col2im(col.data(), d, g, r0, r1, dx);
  }
}

// dW += dy * col(x)^T
void conv_backward_weight(const float* x, const float* dy, const ConvDims& d, const ConvGeometry& g, float* dw) {
  const std::size_t total = static_cast<std::size_t>(d.out.d) * d.plane();
  MapRM dwm(dw, d.cout, d.k_rows());
  if (g.is_pointwise()) {
    dwm.noalias() += CMapRM(dy, d.cout, static_cast<Eigen::Index>(total)) *
                     CMapRM(x, d.cin, static_cast<Eigen::Index>(total)).transpose();
    return;
  }
  const int step = chunk_rows(d);
  const int rows = d.out.d * d.out.h;
  std::vector<float> col(static_cast<std::size_t>(d.k_rows()) * static_cast<std::size_t>(step) * d.out.w);
  for (int r0 = 0; r0 < rows; r0 += step) {
    const int r1 = std::min(rows, r0 + step);
    const auto n = static_cast<Eigen::Index>(static_cast<std::size_t>(r1 - r0) * d.out.w);
    im2col(x, d, g, r0, r1, col.data());
    CStridedMap dym(dy + static_cast<std::size_t>(r0) * d.out.w, d.cout, n, Eigen::OuterStride<>(static_cast<Eigen::Index>(total)));
    dwm.noalias() += dym * MapRM(col.data(), d.k_rows(), n).transpose();
  }
}

const Tensor* bias_ptr(const Var& b) { return b ? &b->value : nullptr; }

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace

Shape3 ConvGeometry::output(Shape3 in) const {
  auto o = [&](int n, int a) { return (n + 2 * padding[a] - kernel[a]) / stride[a] + 1; };
  if (in.d + 2 * padding[0] < kernel[0] || in.h + 2 * padding[1] < kernel[1] || in.w + 2 * padding[2] < kernel[2])
    return {0, 0, 0};
  return {o(in.d, 0), o(in.h, 1), o(in.w, 2)};
}

Shape3 ConvGeometry::transposed_output(Shape3 in) const {
  auto o = [&](int n, int a) { return (n - 1) * stride[a] - 2 * padding[a] + kernel[a]; };
  return {o(in.d, 0), o(in.h, 1), o(in.w, 2)};
}

bool ConvGeometry::is_pointwise() const {
  return kernel == std::array<int, 3>{1, 1, 1} && stride == std::array<int, 3>{1, 1, 1} &&
         padding == std::array<int, 3>{0, 0, 0};
}

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvGeometry& g) {
  const ConvDims d = conv_dims(x, w, g, false);
  Tensor y(d.cout, d.out);
  conv_forward_into(x.data(), w.data(), d, g, y.data());
  add_bias(y, bias);
  return y;
}

Tensor deconv3d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvGeometry& g) {
  const ConvDims d = conv_dims(x, w, g, true);
  Tensor y(d.cin, d.in);
  conv_backward_data(x.data(), w.data(), d, g, y.data());
  add_bias(y, bias);
  return y;
}

Var conv3d(const Var& x, const Var& w, const Var& bias, const ConvGeometry& g) {
  const ConvDims d = conv_dims(x->value, w->value, g, false);
  Tensor y = conv3d(x->value, w->value, bias_ptr(bias), g);
  std::vector<Var> parents{x, w};
  if (bias) parents.push_back(bias);
  return ag::make_result(std::move(y), std::move(parents), [d, g](ag::Node& self) {
    const auto& x = self.parents[0];
    const auto& w = self.parents[1];
    if (x->requires_grad) conv_backward_data(self.grad.data(), w->value.data(), d, g, x->grad_ref().data());
    if (w->requires_grad) conv_backward_weight(x->value.data(), self.grad.data(), d, g, w->grad_ref().data());
    if (self.parents.size() > 2 && self.parents[2]->requires_grad)
      accumulate_bias_grad(self.grad, self.parents[2]->grad_ref());
  });
}

Var deconv3d(const Var& x, const Var& w, const Var& bias, const ConvGeometry& g) {
  const ConvDims d = conv_dims(x->value, w->value, g, true);
  Tensor y = deconv3d(x->value, w->value, bias_ptr(bias), g);
  std::vector<Var> parents{x, w};
  if (bias) parents.push_back(bias);
  return ag::make_result(std::move(y), std::move(parents), [d, g](ag::Node& self) {
    const auto& x = self.parents[0];
    const auto& w = self.parents[1];
    if (x->requires_grad) {
      Tensor& dx = x->grad_ref();
      Tensor tmp(dx.shape());
      conv_forward_into(self.grad.data(), w->value.data(), d, g, tmp.data());
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += tmp[i];
    }
    if (w->requires_grad) conv_backward_weight(self.grad.data(), x->value.data(), d, g, w->grad_ref().data());
    if (self.parents.size() > 2 && self.parents[2]->requires_grad)
      accumulate_bias_grad(self.grad, self.parents[2]->grad_ref());
  });
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
  const Tensor& xv = x->value;
  const int c = xv.channels();
  if (static_cast<int>(gamma->value.size()) != c || static_cast<int>(beta->value.size()) != c)
    throw ShapeError("instance_norm: affine parameters do not match channels");
  const std::size_t m = xv.channel_size();
  std::vector<float> mean(static_cast<std::size_t>(c)), inv(static_cast<std::size_t>(c));
  Tensor y(xv.shape());
  for (int k = 0; k < c; ++k) {
    const float* p = xv.channel(k);
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += p[i];
    const double mu = s / static_cast<double>(m);
    double v = 0.0;
    for (std::size_t i = 0; i < m; ++i) v += (p[i] - mu) * (p[i] - mu);
    v /= static_cast<double>(m);
    const auto ku = static_cast<std::size_t>(k);
    mean[ku] = static_cast<float>(mu);
    inv[ku] = static_cast<float>(1.0 / std::sqrt(v + eps));
    const float g = gamma->value[ku], b = beta->value[ku];
    float* q = y.channel(k);
    for (std::size_t i = 0; i < m; ++i) q[i] = g * (p[i] - mean[ku]) * inv[ku] + b;
  }
  return ag::make_result(std::move(y), {x, gamma, beta}, [mean, inv](ag::Node& self) {
    const auto& x = self.parents[0];
    const auto& gamma = self.parents[1];
    const auto& beta = self.parents[2];
    const Tensor& xv = x->value;
    const std::size_t m = xv.channel_size();
    for (int k = 0; k < xv.channels(); ++k) {
      const auto ku = static_cast<std::size_t>(k);
      const float* p = xv.channel(k);
      const float* dy = self.grad.channel(k);
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double xhat = (p[i] - mean[ku]) * inv[ku];
        sum_dy += dy[i];
        sum_dy_xhat += dy[i] * xhat;
      }
      if (gamma->requires_grad) gamma->grad_ref()[ku] += static_cast<float>(sum_dy_xhat);
      if (beta->requires_grad) beta->grad_ref()[ku] += static_cast<float>(sum_dy);
      if (x->requires_grad) {
        const double g = gamma->value[ku];
        const double mean_dy = sum_dy / static_cast<double>(m);
        const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(m);
        float* dx = x->grad_ref().channel(k);
        for (std::size_t i = 0; i < m; ++i) {
          const double xhat = (p[i] - mean[ku]) * inv[ku];
          dx[i] += static_cast<float>(g * inv[ku] * (dy[i] - mean_dy - xhat * mean_dy_xhat));
        }
      }
    }
  });
}

Var relu(const Var& x) {
  Tensor y = x->value;
  for (float& v : y.values()) v = v > 0.0f ? v : 0.0f;
  return ag::make_result(std::move(y), {x}, [](ag::Node& self) {
    Tensor& dx = self.parents[0]->grad_ref();
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (self.value[i] > 0.0f) dx[i] += self.grad[i];
  });
}

Var add(const Var& a, const Var& b) {
  check_same(a->value, b->value, "add");
  Tensor y = a->value;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b->value[i];
  return ag::make_result(std::move(y), {a, b}, [](ag::Node& self) {
    for (const auto& p : self.parents) {
      if (!p->requires_grad) continue;
      Tensor& d = p->grad_ref();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    }
  });
}

Var scale(const Var& x, float s) {
  Tensor y = x->value;
  for (float& v : y.values()) v *= s;
  return ag::make_result(std::move(y), {x}, [s](ag::Node& self) {
    Tensor& d = self.parents[0]->grad_ref();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * self.grad[i];
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const Shape3 sa = a->value.spatial();
  if (!(sa == b->value.spatial())) throw ShapeError("concat_channels: spatial mismatch");
  const int ca = a->value.channels(), cb = b->value.channels();
  Tensor y(ca + cb, sa);
  std::copy(a->value.data(), a->value.data() + a->value.size(), y.data());
  std::copy(b->value.data(), b->value.data() + b->value.size(), y.data() + a->value.size());
  return ag::make_result(std::move(y), {a, b}, [](ag::Node& self) {
    std::size_t offset = 0;
    for (const auto& p : self.parents) {
      const std::size_t n = p->value.size();
      if (p->requires_grad) {
        Tensor& d = p->grad_ref();
        for (std::size_t i = 0; i < n; ++i) d[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

Var upsample_nearest(const Var& x, std::array<int, 3> f) {
  const Shape3 in = x->value.spatial();
  const Shape3 out{in.d * f[0], in.h * f[1], in.w * f[2]};
  const int c = x->value.channels();
  Tensor y(c, out);
  for (int k = 0; k < c; ++k)
    for (int z = 0; z < out.d; ++z)
      for (int yy = 0; yy < out.h; ++yy)
        for (int xx = 0; xx < out.w; ++xx) y.at(k, z, yy, xx) = x->value.at(k, z / f[0], yy / f[1], xx / f[2]);
  return ag::make_result(std::move(y), {x}, [f](ag::Node& self) {
    Tensor& dx = self.parents[0]->grad_ref();
    const Shape3 out = self.value.spatial();
    for (int k = 0; k < self.value.channels(); ++k)
      for (int z = 0; z < out.d; ++z)
        for (int yy = 0; yy < out.h; ++yy)
          for (int xx = 0; xx < out.w; ++xx) dx.at(k, z / f[0], yy / f[1], xx / f[2]) += self.grad.at(k, z, yy, xx);
  });
}

namespace {

struct Tap {
  int i0;
  int i1;
  float f;
};

std::vector<Tap> linear_taps(int n_in, int n_out) {
  std::vector<Tap> taps(static_cast<std::size_t>(n_out));
  for (int i = 0; i < n_out; ++i) {
    const double s = corner_aligned_coord(i, n_in, n_out);
    const int i0 = std::clamp(static_cast<int>(std::floor(s)), 0, std::max(0, n_in - 2));
    const int i1 = std::min(i0 + 1, n_in - 1);
    taps[static_cast<std::size_t>(i)] = {i0, i1, n_in == 1 ? 0.0f : static_cast<float>(s - i0)};
  }
  return taps;
}

// Linear resize of one axis (0 = z, 1 = y, 2 = x) of a rank-4 tensor, or the
// adjoint scatter when `adjoint` is set (then `src` is in the output space).
Tensor resize_axis(const Tensor& src, int axis, int n_in, int n_out, bool adjoint) {
  const Shape3 s = src.spatial();
  Shape3 t = s;
  const int n_dst = adjoint ? n_in : n_out;
  if (axis == 0) t.d = n_dst;
  if (axis == 1) t.h = n_dst;
  if (axis == 2) t.w = n_dst;
  const auto taps = linear_taps(n_in, n_out);
  Tensor dst(src.channels(), t);
  // View each tensor as (outer, n, inner) around the resized axis.
  const std::size_t outer = static_cast<std::size_t>(src.channels()) * (axis >= 1 ? s.d : 1) * (axis == 2 ? s.h : 1);
  const std::size_t inner = axis == 0 ? s.voxels() / s.d : (axis == 1 ? static_cast<std::size_t>(s.w) : 1);
  const int n_src = s[axis];
  for (std::size_t o = 0; o < outer; ++o) {
    const float* sp = src.data() + o * static_cast<std::size_t>(n_src) * inner;
    float* dp = dst.data() + o * static_cast<std::size_t>(n_dst) * inner;
    for (int i = 0; i < n_out; ++i) {
      const Tap& tp = taps[static_cast<std::size_t>(i)];
      if (!adjoint) {
        const float* a = sp + static_cast<std::size_t>(tp.i0) * inner;
        const float* b = sp + static_cast<std::size_t>(tp.i1) * inner;
        float* q = dp + static_cast<std::size_t>(i) * inner;
        for (std::size_t j = 0; j < inner; ++j) q[j] = a[j] + tp.f * (b[j] - a[j]);
      } else {
        const float* g = sp + static_cast<std::size_t>(i) * inner;
        float* a = dp + static_cast<std::size_t>(tp.i0) * inner;
        float* b = dp + static_cast<std::size_t>(tp.i1) * inner;
        for (std::size_t j = 0; j < inner; ++j) {
          a[j] += (1.0f - tp.f) * g[j];
          b[j] += tp.f * g[j];
        }
      }
    }
  }
  return dst;
}

}  // namespace

Tensor resize_trilinear(const Tensor& x, Shape3 target) {
  const Shape3 s = x.spatial();
  if (target.d < 1 || target.h < 1 || target.w < 1) throw ShapeError("resize target dims must be >= 1");
  Tensor r = s.w == target.w ? x : resize_axis(x, 2, s.w, target.w, false);
  if (s.h != target.h) r = resize_axis(r, 1, s.h, target.h, false);
  if (s.d != target.d) r = resize_axis(r, 0, s.d, target.d, false);
  return r;
}

Var resize_trilinear(const Var& x, Shape3 target) {
  const Shape3 s = x->value.spatial();
  Tensor y = resize_trilinear(x->value, target);
  return ag::make_result(std::move(y), {x}, [s, target](ag::Node& self) {
    Tensor g = self.grad;
    if (s.d != target.d) g = resize_axis(g, 0, s.d, target.d, true);
    if (s.h != target.h) g = resize_axis(g, 1, s.h, target.h, true);
    if (s.w != target.w) g = resize_axis(g, 2, s.w, target.w, true);
    Tensor& dx = self.parents[0]->grad_ref();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
  });
}

Tensor softmax_channels(const Tensor& logits) {
  const int c = logits.channels();
  const std::size_t m = logits.channel_size();
  Tensor p(logits.shape());
  std::vector<double> e(static_cast<std::size_t>(c));
  for (std::size_t i = 0; i < m; ++i) {
    float mx = logits.channel(0)[i];
    for (int k = 1; k < c; ++k) mx = std::max(mx, logits.channel(k)[i]);
    double s = 0.0;
    for (int k = 0; k < c; ++k) {
      e[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(logits.channel(k)[i]) - mx);
      s += e[static_cast<std::size_t>(k)];
    }
    for (int k = 0; k < c; ++k) p.channel(k)[i] = static_cast<float>(e[static_cast<std::size_t>(k)] / s);
  }
  return p;
}

Var softmax_channels(const Var& x) {
  Tensor p = softmax_channels(x->value);
  return ag::make_result(std::move(p), {x}, [](ag::Node& self) {
    const int c = self.value.channels();
    const std::size_t m = self.value.channel_size();
    Tensor& dx = self.parents[0]->grad_ref();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (int k = 0; k < c; ++k) dot += static_cast<double>(self.grad.channel(k)[i]) * self.value.channel(k)[i];
      for (int k = 0; k < c; ++k)
        dx.channel(k)[i] += static_cast<float>(self.value.channel(k)[i] * (self.grad.channel(k)[i] - dot));
    }
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (float v : x->value.values()) s += v;
  return ag::make_result(Tensor::scalar(static_cast<float>(s)), {x}, [](ag::Node& self) {
    Tensor& dx = self.parents[0]->grad_ref();
    const float g = self.grad[0];
    for (float& v : dx.values()) v += g;
  });
}

Var gather(const std::vector<Var>& sources, const std::vector<std::pair<int, std::size_t>>& refs) {
  if (refs.empty()) throw ShapeError("gather: no elements selected");
  Tensor y({static_cast<int>(refs.size())});
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& [s, k] = refs[i];
    const Tensor& v = sources.at(static_cast<std::size_t>(s))->value;
    if (k >= v.size()) throw ShapeError("gather: index out of range");
    y[i] = v[k];
  }
  return ag::make_result(std::move(y), sources, [refs](ag::Node& self) {
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const auto& p = self.parents[static_cast<std::size_t>(refs[i].first)];
      if (p->requires_grad) p->grad_ref()[refs[i].second] += self.grad[i];
    }
  });
}

Var weighted_sum(const std::vector<Var>& terms, const std::vector<float>& weights) {
  if (terms.size() != weights.size()) throw ShapeError("weighted_sum: terms/weights length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i]->value.size() != 1) throw ShapeError("weighted_sum: terms must be scalars");
    s += static_cast<double>(weights[i]) * terms[i]->value[0];
  }
  return ag::make_result(Tensor::scalar(static_cast<float>(s)), terms, [weights](ag::Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i)
      if (self.parents[i]->requires_grad) self.parents[i]->grad_ref()[0] += weights[i] * self.grad[0];
  });
}

}  // namespace cfun::nn
