#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "cfun/rng.hpp"
#include "cfun/tensor.hpp"
#include "cfun/volume.hpp"

namespace testing {

inline cfun::Tensor random_tensor(std::vector<int> shape, cfun::SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
  cfun::Tensor t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

inline double max_abs_diff(const cfun::Tensor& a, const cfun::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

inline double max_abs(const cfun::Tensor& a) {
  double m = 0.0;
  for (float v : a.values()) m = std::max(m, std::abs(double(v)));
  return m;
}

// Plain seven-loop cross-correlation in double precision.
inline cfun::Tensor naive_conv(const cfun::Tensor& x, const cfun::Tensor& w, const cfun::Tensor* bias, int stride,
                               int pad) {
  const int cin = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int cout = w.dim(0), kz = w.dim(2), ky = w.dim(3), kx = w.dim(4);
  const int od = (D + 2 * pad - kz) / stride + 1;
  const int oh = (H + 2 * pad - ky) / stride + 1;
  const int ow = (W + 2 * pad - kx) / stride + 1;
  cfun::Tensor out({cout, od, oh, ow});
  for (int o = 0; o < cout; ++o)
    for (int z = 0; z < od; ++z)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = bias ? (*bias)[static_cast<std::size_t>(o)] : 0.0;
          for (int c = 0; c < cin; ++c)
            for (int a = 0; a < kz; ++a)
              for (int b = 0; b < ky; ++b)
                for (int e = 0; e < kx; ++e) {
                  const int iz = z * stride - pad + a, iy = y * stride - pad + b, ix = xx * stride - pad + e;
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= D || iy >= H || ix >= W) continue;
                  const std::size_t wi = ((((static_cast<std::size_t>(o) * cin + c) * kz + a) * ky + b) * kx + e);
                  acc += double(w[wi]) * x.at(c, iz, iy, ix);
                }
          out.at(o, z, y, xx) = static_cast<float>(acc);
        }
  return out;
}

inline double dot(const cfun::Tensor& a, const cfun::Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * b[i];
  return s;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cfun_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline cfun::LabelVolume random_labels(cfun::Shape3 s, cfun::SplitMix64& rng, double fg_prob = 0.5) {
  cfun::LabelVolume l(s, 8);
  for (auto& v : l.data) v = rng.uniform() < fg_prob ? static_cast<std::uint8_t>(1 + rng.below(7)) : 0;
  return l;
}

}  // namespace testing
