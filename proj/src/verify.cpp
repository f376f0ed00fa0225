#include "cfun/verify.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfun/detector.hpp"
#include "cfun/gradcheck.hpp"
#include "cfun/losses.hpp"
#include "cfun/phantom.hpp"
#include "cfun/roi_align.hpp"
#include "cfun/unet.hpp"

namespace cfun {

namespace {

double rel(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

Tensor random_tensor(std::vector<int> shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

int pick(SplitMix64& rng, int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }

Tensor naive_conv(const Tensor& x, const Tensor& w, const nn::ConvGeometry& g) {
  const Shape3 in = x.spatial();
  const Shape3 out = g.output(in);
  const int cout = w.dim(0), cin = w.dim(1);
  Tensor y(cout, out);
  for (int co = 0; co < cout; ++co)
    for (int z = 0; z < out.d; ++z)
      for (int yy = 0; yy < out.h; ++yy)
        for (int xx = 0; xx < out.w; ++xx) {
          double s = 0.0;
          for (int ci = 0; ci < cin; ++ci)
            for (int a = 0; a < g.kernel[0]; ++a)
              for (int b = 0; b < g.kernel[1]; ++b)
                for (int c = 0; c < g.kernel[2]; ++c) {
                  const int iz = z * g.stride[0] - g.padding[0] + a;
                  const int iy = yy * g.stride[1] - g.padding[1] + b;
                  const int ix = xx * g.stride[2] - g.padding[2] + c;
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= in.d || iy >= in.h || ix >= in.w) continue;
                  s += static_cast<double>(x.at(ci, iz, iy, ix)) *
                       w[((((static_cast<std::size_t>(co) * cin + ci) * g.kernel[0] + a) * g.kernel[1] + b) *
                          g.kernel[2]) + c];
                }
          y.at(co, z, yy, xx) = static_cast<float>(s);
        }
  return y;
}

// +z Sobel kernel written out literally; other directions permute its axes.
double sobel_weight(int axis, int a, int b, int c) {
  static constexpr int kUp[3][3] = {{1, 2, 1}, {2, 4, 2}, {1, 2, 1}};
  const int off[3] = {a, b, c};
  const int along = off[axis];
  int u = -1, v = -1;
  for (int k = 0; k < 3; ++k) {
    if (k == axis) continue;
    (u < 0 ? u : v) = off[k];
  }
  const int sign = along == 0 ? 1 : (along == 2 ? -1 : 0);
  return sign * kUp[u][v];
}

CheckResult check_conv(const VerifyOptions& o, SplitMix64& rng) {
  CheckResult r{"conv3d", 0.0, 1e-5, o.instances};
  for (int n = 0; n < o.instances; ++n) {
    const int cin = pick(rng, 1, 3), cout = pick(rng, 1, 3), k = pick(rng, 1, 3), s = pick(rng, 1, 2);
    const int p = pick(rng, 0, k / 2);
    const nn::ConvGeometry g = nn::ConvGeometry::cube(k, s, p);
    const Tensor x = random_tensor({cin, pick(rng, k, 8), pick(rng, k, 8), pick(rng, k, 8)}, rng);
    const Tensor w = random_tensor({cout, cin, k, k, k}, rng);
    const Tensor got = nn::conv3d(x, w, nullptr, g);
    const Tensor want = naive_conv(x, w, g);
    for (std::size_t i = 0; i < want.size(); ++i) r.max_error = std::max(r.max_error, rel(got[i], want[i]));
  }
  return r;
}

CheckResult check_edge_response(const VerifyOptions& o, SplitMix64& rng) {
  static constexpr float kWrong[3][3] = {{1.0f, 2.0f, 1.0f}, {2.0f, 5.0f, 2.0f}, {1.0f, 2.0f, 1.0f}};
  const loss::SobelBank bank = o.corrupt_sobel ? loss::sobel_bank_from(kWrong) : loss::sobel_bank();
  CheckResult r{"edge_response", 0.0, 1e-5, o.instances};
  for (int n = 0; n < o.instances; ++n) {
    const int dir = pick(rng, 0, 5);
    const int axis = dir % 3;
    const double sign = dir < 3 ? 1.0 : -1.0;
    const Tensor x = random_tensor({pick(rng, 1, 3), pick(rng, 1, 8), pick(rng, 1, 8), pick(rng, 1, 8)}, rng, 0.0, 1.0);
    const Tensor got = loss::edge_response(x, bank.kernels[static_cast<std::size_t>(dir)]);
    const Shape3 s = x.spatial();
    for (int c = 0; c < x.channels(); ++c)
      for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
          for (int xx = 0; xx < s.w; ++xx) {
            double want = 0.0;
            for (int a = 0; a < 3; ++a)
              for (int b = 0; b < 3; ++b)
                for (int cc = 0; cc < 3; ++cc) {
                  const int iz = z + a - 1, iy = y + b - 1, ix = xx + cc - 1;
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= s.d || iy >= s.h || ix >= s.w) continue;
                  want += sign * sobel_weight(axis, a, b, cc) * x.at(c, iz, iy, ix);
                }
            r.max_error = std::max(r.max_error, rel(got.at(c, z, y, xx), want));
          }
  }
  return r;
}

CheckResult check_seg_loss(const VerifyOptions& o, SplitMix64& rng) {
  CheckResult r{"seg_loss", 0.0, 1e-6, o.instances};
  for (int n = 0; n < o.instances; ++n) {
    const Shape3 s{pick(rng, 1, 8), pick(rng, 1, 8), pick(rng, 1, 8)};
    Tensor logits = random_tensor({8, s.d, s.h, s.w}, rng, -4.0, 4.0);
    LabelVolume lab;
    lab.shape = s;
    lab.data.resize(s.voxels());
    for (auto& v : lab.data) v = static_cast<std::uint8_t>(rng.below(8));
    double want = 0.0;
    for (std::size_t i = 0; i < s.voxels(); ++i) {
      double z = 0.0;
      for (int c = 0; c < 8; ++c) z += std::exp(static_cast<double>(logits.channel(c)[i]));
      want -= logits.channel(lab.data[i])[i] - std::log(z);
    }
    want /= static_cast<double>(s.voxels());
    r.max_error = std::max(r.max_error, rel(loss::seg_loss({logits, SegKind::Logits}, lab), want));
  }
  return r;
}

double naive_bce(double x, int t) {
  const double p = 1.0 / (1.0 + std::exp(-x));
  return t > 0 ? -std::log(p) : -std::log(1.0 - p);
}

CheckResult check_cls_loss(const VerifyOptions& o, SplitMix64& rng) {
  CheckResult r{"cls_loss", 0.0, 1e-6, o.instances};
  for (int n = 0; n < o.instances; ++n) {
    const int m = pick(rng, 1, 40);
    std::vector<float> logits(static_cast<std::size_t>(m));
    std::vector<std::int8_t> t(static_cast<std::size_t>(m));
    for (auto& v : logits) v = static_cast<float>(rng.uniform(-5.0, 5.0));
    for (auto& v : t) v = static_cast<std::int8_t>(static_cast<int>(rng.below(3)) - 1);
    t[0] = loss::kPositive;
    const float refine = static_cast<float>(rng.uniform(-5.0, 5.0));
    const std::int8_t refine_t = rng.below(2) ? loss::kPositive : loss::kNegative;
    double acc = 0.0;
    int used = 0;
    for (int i = 0; i < m; ++i)
      if (t[static_cast<std::size_t>(i)] != 0) {
        acc += naive_bce(logits[static_cast<std::size_t>(i)], t[static_cast<std::size_t>(i)]);
        ++used;
      }
    const double want = acc / used + naive_bce(refine, refine_t);
    const double got = loss::cls_loss(logits, t, std::span<const float>(&refine, 1),
                                      std::span<const std::int8_t>(&refine_t, 1));
    r.max_error = std::max(r.max_error, rel(got, want));
  }
  return r;
}

CheckResult check_box_loss(const VerifyOptions& o, SplitMix64& rng) {
  CheckResult r{"box_loss", 0.0, 1e-6, o.instances};
  for (int n = 0; n < o.instances; ++n) {
    const int m = pick(rng, 1, 20);
    std::vector<float> pred(static_cast<std::size_t>(6 * m)), target(pred.size());
    std::vector<std::uint8_t> pos(static_cast<std::size_t>(m));
    for (auto& v : pred) v = static_cast<float>(rng.uniform(-3.0, 3.0));
    for (auto& v : target) v = static_cast<float>(rng.uniform(-3.0, 3.0));
    for (auto& v : pos) v = static_cast<std::uint8_t>(rng.below(2));
    pos[0] = 1;
    double acc = 0.0;
    int count = 0;
    for (int i = 0; i < m; ++i) {
      if (!pos[static_cast<std::size_t>(i)]) continue;
      ++count;
      for (int k = 0; k < 6; ++k) {
        const double d = std::abs(static_cast<double>(pred[static_cast<std::size_t>(6 * i + k)]) -
                                  target[static_cast<std::size_t>(6 * i + k)]);
        acc += d < 1.0 ? 0.5 * d * d : d - 0.5;
      }
    }
    const double want = acc / (6.0 * count);
    r.max_error = std::max(r.max_error, rel(loss::box_loss(pred, target, pos), want));
  }
  return r;
}

BBox3D random_box(SplitMix64& rng, double extent) {
  const double z = rng.uniform(0, extent), y = rng.uniform(0, extent), x = rng.uniform(0, extent);
  return {z, y, x, z + rng.uniform(1, extent / 2), y + rng.uniform(1, extent / 2), x + rng.uniform(1, extent / 2)};
}

CheckResult check_nms(const VerifyOptions& o, SplitMix64& rng) {
  CheckResult r{"nms_3d", 0.0, 0.0, o.instances};
  for (int n = 0; n < o.instances; ++n) {
    const int m = pick(rng, 1, 50);
    const double thresh = rng.uniform(0.1, 0.9);
    std::vector<Proposal> props;
    for (int i = 0; i < m; ++i) props.push_back({random_box(rng, 20.0), std::round(rng.uniform() * 10.0) / 10.0});
    // Reference: repeatedly take the best remaining candidate and strike
    // everything it overlaps.
    std::vector<bool> alive(props.size(), true);
    std::vector<std::size_t> want;
    while (true) {
      std::size_t best = props.size();
      for (std::size_t i = 0; i < props.size(); ++i)
        if (alive[i] && (best == props.size() || props[i].score > props[best].score)) best = i;
      if (best == props.size()) break;
      want.push_back(best);
      alive[best] = false;
      for (std::size_t i = 0; i < props.size(); ++i)
        if (alive[i] && iou_3d(props[best].box, props[i].box) > thresh) alive[i] = false;
    }
    const auto got = nms_3d(props, thresh);
    bool same = got.size() == want.size();
    for (std::size_t i = 0; same && i < got.size(); ++i) same = got[i].box == props[want[i]].box;
    if (!same) r.max_error += 1.0;
  }
  return r;
}

CheckResult check_roi_align(const VerifyOptions& o, SplitMix64& rng) {
  CheckResult r{"roi_align", 0.0, 1e-5, o.instances};
  for (int n = 0; n < o.instances; ++n) {
    const Tensor src = random_tensor({pick(rng, 1, 2), pick(rng, 2, 8), pick(rng, 2, 8), pick(rng, 2, 8)}, rng);
    const Shape3 s = src.spatial();
    const Shape3 size{pick(rng, 1, s.d), pick(rng, 1, s.h), pick(rng, 1, s.w)};
    const int z0 = pick(rng, 0, s.d - size.d), y0 = pick(rng, 0, s.h - size.h), x0 = pick(rng, 0, s.w - size.w);
    const BBox3D box{static_cast<double>(z0), static_cast<double>(y0), static_cast<double>(x0),
                     static_cast<double>(z0 + size.d), static_cast<double>(y0 + size.h),
                     static_cast<double>(x0 + size.w)};
    const Tensor got = roi_align(src, box, RoiAlignSpec{size, 1});
    for (int c = 0; c < src.channels(); ++c)
      for (int z = 0; z < size.d; ++z)
        for (int y = 0; y < size.h; ++y)
          for (int x = 0; x < size.w; ++x)
            r.max_error = std::max(r.max_error, rel(got.at(c, z, y, x), src.at(c, z0 + z, y0 + y, x0 + x)));
  }
  return r;
}

CheckResult check_gt_box(const VerifyOptions& o, SplitMix64& rng) {
  CheckResult r{"ground_truth_box", 0.0, 0.0, o.instances};
  for (int n = 0; n < o.instances; ++n) {
    LabelVolume lab;
    lab.shape = {pick(rng, 1, 8), pick(rng, 1, 8), pick(rng, 1, 8)};
    lab.data.assign(lab.shape.voxels(), 0);
    const int hits = pick(rng, 1, 6);
    for (int i = 0; i < hits; ++i) lab.data[rng.below(lab.data.size())] = static_cast<std::uint8_t>(pick(rng, 1, 7));
    int lo[3] = {1 << 20, 1 << 20, 1 << 20}, hi[3] = {-1, -1, -1};
    for (int z = 0; z < lab.shape.d; ++z)
      for (int y = 0; y < lab.shape.h; ++y)
        for (int x = 0; x < lab.shape.w; ++x)
          if (lab.data[(static_cast<std::size_t>(z) * lab.shape.h + y) * lab.shape.w + x]) {
            const int p[3] = {z, y, x};
            for (int a = 0; a < 3; ++a) {
              lo[a] = std::min(lo[a], p[a]);
              hi[a] = std::max(hi[a], p[a] + 1);
            }
          }
    const BBox3D want{static_cast<double>(lo[0]), static_cast<double>(lo[1]), static_cast<double>(lo[2]),
                      static_cast<double>(hi[0]), static_cast<double>(hi[1]), static_cast<double>(hi[2])};
    const auto g = ground_truth_box(lab).as_array();
    const auto w = want.as_array();
    for (std::size_t k = 0; k < 6; ++k) r.max_error = std::max(r.max_error, std::abs(g[k] - w[k]));
  }
  return r;
}

constexpr double kGradTolerance = 1e-2;

CheckResult grad_conv(SplitMix64& rng, bool transposed) {
  CheckResult r{transposed ? "grad deconv3d" : "grad conv3d", 0.0, kGradTolerance, 2};
  const nn::ConvGeometry g = transposed ? nn::ConvGeometry::cube(2, 2, 0) : nn::ConvGeometry::cube(3, 1, 1);
  auto x = ag::parameter(random_tensor({2, 4, 5, 6}, rng));
  auto w = ag::parameter(random_tensor(transposed ? std::vector<int>{2, 3, 2, 2, 2} : std::vector<int>{3, 2, 3, 3, 3}, rng));
  auto b = ag::parameter(random_tensor({3}, rng));
  auto f = [&] { return nn::sum(transposed ? nn::deconv3d(x, w, b, g) : nn::conv3d(x, w, b, g)); };
  // Linear in each argument, so a wide step adds no truncation error and
  // keeps float round-off out of the difference quotient.
  const nn::GradCheckOptions wide{1e-2f, 48, 1};
  r.max_error = std::max(nn::grad_check(f, x, wide), nn::grad_check(f, w, wide));
  return r;
}

CheckResult grad_p3d(SplitMix64& rng) {
  CheckResult r{"grad p3d_bottleneck", 0.0, kGradTolerance, 1};
  nn::ParamStore ps;
  nn::P3DBottleneck block(ps, "b", {2, 2, 3, {2, 2, 2}}, rng);
  auto x = ag::parameter(random_tensor({2, 6, 6, 6}, rng));
  const Tensor probe = random_tensor({3, 3, 3, 3}, rng);
  // A random linear readout keeps the normalization from cancelling the signal.
  auto g = [&] {
    ag::Var y = block(x);
    Tensor w({1, 3, 3, 3, 3});
    std::copy(probe.values().begin(), probe.values().end(), w.values().begin());
    return nn::sum(nn::conv3d(y, ag::constant(w), ag::Var(), nn::ConvGeometry::cube(3, 1, 0)));
  };
  r.max_error = nn::grad_check(g, x);
  for (const auto& [name, p] : ps.params()) r.max_error = std::max(r.max_error, nn::grad_check(g, p));
  return r;
}

CheckResult grad_roi(SplitMix64& rng) {
  CheckResult r{"grad roi_align", 0.0, kGradTolerance, 1};
  auto x = ag::parameter(random_tensor({1, 6, 6, 6}, rng));
  const Tensor probe = random_tensor({1, 3, 4, 2}, rng);
  auto f = [&] {
    ag::Var y = roi_align(x, BBox3D{0.7, 1.3, 0.2, 5.1, 4.4, 5.9}, RoiAlignSpec{{3, 4, 2}, 2});
    Tensor w({1, 1, 3, 4, 2});
    std::copy(probe.values().begin(), probe.values().end(), w.values().begin());
    return nn::sum(nn::conv3d(y, ag::constant(w), ag::Var(), nn::ConvGeometry{{3, 4, 2}, {1, 1, 1}, {0, 0, 0}}));
  };
  r.max_error = nn::grad_check(f, x, {1e-3f, 216, 1});
  return r;
}

CheckResult grad_unet(SplitMix64& rng) {
  CheckResult r{"grad unet_forward+seg_loss", 0.0, kGradTolerance, 1};
  nn::ParamStore ps;
  UnetConfig cfg;
  cfg.base_channels = 2;
  // One downsampling keeps 64 voxels under the bottleneck normalization; a
  // 2^3 bottleneck makes its statistics ill-conditioned in float.
  cfg.depth = 1;
  cfg.final_channels = 2;
  Unet net(ps, cfg, rng);
  auto x = ag::parameter(random_tensor({1, 8, 8, 8}, rng));
  LabelVolume lab;
  lab.shape = {16, 16, 16};
  lab.data.resize(lab.shape.voxels());
  for (auto& v : lab.data) v = static_cast<std::uint8_t>(rng.below(8));
  auto f = [&] { return loss::seg_loss(net.forward(x).logits, lab); };
  r.max_error = nn::grad_check(f, x);
  int checked = 0;
  for (const auto& [name, p] : ps.params())
    if (checked++ % 5 == 0) r.max_error = std::max(r.max_error, nn::grad_check(f, p, {1e-3f, 8, 3}));
  return r;
}

CheckResult grad_edge(const VerifyOptions& o, SplitMix64& rng) {
  CheckResult r{"grad softmax+edge_loss", 0.0, kGradTolerance, 1};
  static constexpr float kWrong[3][3] = {{1.0f, 2.0f, 1.0f}, {2.0f, 5.0f, 2.0f}, {1.0f, 2.0f, 1.0f}};
  const loss::SobelBank bank = o.corrupt_sobel ? loss::sobel_bank_from(kWrong) : loss::sobel_bank();
  auto x = ag::parameter(random_tensor({8, 5, 6, 7}, rng, -2.0, 2.0));
  LabelVolume lab;
  lab.shape = {5, 6, 7};
  lab.data.resize(lab.shape.voxels());
  for (auto& v : lab.data) v = static_cast<std::uint8_t>(rng.below(8));
  const Tensor y = one_hot(lab).data;
  for (auto norm : {loss::EdgeNorm::Absolute, loss::EdgeNorm::Squared}) {
    auto f = [&] { return loss::edge_loss(nn::softmax_channels(x), y, bank, norm); };
    r.max_error = std::max(r.max_error, nn::grad_check(f, x, {1e-3f, 96, 5}));
  }
  return r;
}

}  // namespace

std::vector<CheckResult> run_verification(const VerifyOptions& opts) {
  std::vector<CheckResult> out;
  SplitMix64 rng(opts.seed);
  if (opts.oracles) {
    out.push_back(check_conv(opts, rng));
    out.push_back(check_edge_response(opts, rng));
    out.push_back(check_seg_loss(opts, rng));
    out.push_back(check_cls_loss(opts, rng));
    out.push_back(check_box_loss(opts, rng));
    out.push_back(check_nms(opts, rng));
    out.push_back(check_roi_align(opts, rng));
    out.push_back(check_gt_box(opts, rng));
  }
  if (opts.gradients) {
    SplitMix64 grng(opts.seed ^ 0x6772616400000000ULL);
    out.push_back(grad_conv(grng, false));
    out.push_back(grad_conv(grng, true));
    out.push_back(grad_p3d(grng));
    out.push_back(grad_roi(grng));
    out.push_back(grad_unet(grng));
    out.push_back(grad_edge(opts, grng));
  }
  return out;
}

}  // namespace cfun
