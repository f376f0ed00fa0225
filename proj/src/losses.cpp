#include "cfun/losses.hpp"

#include <algorithm>
#include <cmath>

#include "cfun/error.hpp"
#include "cfun/ops.hpp"

namespace cfun::loss {

SobelBank sobel_bank_from(const float (&up)[3][3]) {
  SobelBank bank;
  for (int axis = 0; axis < 3; ++axis) {
    Kernel3 k{};
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        for (int c = 0; c < 3; ++c) {
          // Position along the kernel's own axis and along the two others.
          const int along = axis == 0 ? a : (axis == 1 ? b : c);
          const int u = axis == 0 ? b : a;
          const int v = axis == 2 ? b : c;
          const float s = along == 0 ? 1.0f : (along == 2 ? -1.0f : 0.0f);
          k[static_cast<std::size_t>((a * 3 + b) * 3 + c)] = s * up[u][v];
        }
    bank.kernels.push_back(k);
  }
  for (int axis = 0; axis < 3; ++axis) {
    Kernel3 k = bank.kernels[static_cast<std::size_t>(axis)];
    for (float& v : k) v = -v;
    bank.kernels.push_back(k);
  }
  return bank;
}

SobelBank sobel_bank() { return sobel_bank_from(kSobelUp); }

namespace {

struct Tap {
  int dz, dy, dx;
  float w;
};

std::vector<Tap> taps_of(const Kernel3& k) {
  std::vector<Tap> taps;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < 3; ++c) {
        const float w = k[static_cast<std::size_t>((a * 3 + b) * 3 + c)];
        if (w != 0.0f) taps.push_back({a - 1, b - 1, c - 1, w});
      }
  return taps;
}

// out += correlate(in, taps) over one channel with zero padding. With
// `transpose` set the taps are mirrored, which gives the adjoint map.
void stencil(const float* in, Shape3 s, const std::vector<Tap>& taps, bool transpose, float* out) {
  for (const Tap& t : taps) {
    const int dz = transpose ? -t.dz : t.dz;
    const int dy = transpose ? -t.dy : t.dy;
    const int dx = transpose ? -t.dx : t.dx;
    const int z0 = std::max(0, -dz), z1 = std::min(s.d, s.d - dz);
    const int y0 = std::max(0, -dy), y1 = std::min(s.h, s.h - dy);
    const int x0 = std::max(0, -dx), x1 = std::min(s.w, s.w - dx);
    for (int z = z0; z < z1; ++z)
      for (int y = y0; y < y1; ++y) {
        float* o = out + (static_cast<std::size_t>(z) * s.h + y) * s.w;
        const float* i = in + (static_cast<std::size_t>(z + dz) * s.h + (y + dy)) * s.w + dx;
        for (int x = x0; x < x1; ++x) o[x] += t.w * i[x];
      }
  }
}

// Kernels that agree up to sign give identical |E| and E^2 terms, so each
// distinct kernel is evaluated once and weighted by its multiplicity.
std::vector<std::pair<std::vector<Tap>, int>> distinct_kernels(const SobelBank& bank) {
  std::vector<std::pair<Kernel3, int>> groups;
  for (const auto& k : bank.kernels) {
    Kernel3 neg = k;
    for (float& v : neg) v = -v;
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == k || g.first == neg; });
    if (it == groups.end())
      groups.emplace_back(k, 1);
    else
      ++it->second;
  }
  std::vector<std::pair<std::vector<Tap>, int>> out;
  for (const auto& [k, n] : groups) out.emplace_back(taps_of(k), n);
  return out;
}

void check_probability_pair(const Tensor& p, const Tensor& y) {
  if (!p.same_shape(y)) throw ShapeError("edge_loss: shape mismatch " + p.shape_str() + " vs " + y.shape_str());
  const std::size_t m = p.channel_size();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (int c = 0; c < p.channels(); ++c) s += p.channel(c)[i];
    if (std::abs(s - 1.0) > 1e-3) throw ShapeError("edge_loss: prediction is not normalized");
  }
}

struct EdgeEval {
  double loss = 0.0;
  Tensor grad;  // d loss / d p, filled when requested
};

EdgeEval edge_eval(const Tensor& p, const Tensor& y, const SobelBank& bank, EdgeNorm norm, bool want_grad) {
  if (bank.kernels.empty()) throw ShapeError("edge_loss: empty kernel bank");
  const int channels = p.channels();
  const Shape3 s = p.spatial();
  const std::size_t m = s.voxels();
  const double scale = 1.0 / (static_cast<double>(channels) * bank.kernels.size() * m);
  const auto groups = distinct_kernels(bank);
  EdgeEval r;
  if (want_grad) r.grad = Tensor(p.shape(), 0.0f);
  std::vector<float> diff(m), resp(m), back(m);
  for (int c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < m; ++i) diff[i] = y.channel(c)[i] - p.channel(c)[i];
    for (const auto& [taps, mult] : groups) {
      std::fill(resp.begin(), resp.end(), 0.0f);
      stencil(diff.data(), s, taps, false, resp.data());
      double acc = 0.0;
      for (std::size_t i = 0; i < m; ++i)
        acc += norm == EdgeNorm::Absolute ? std::abs(resp[i]) : static_cast<double>(resp[i]) * resp[i];
      r.loss += mult * scale * acc;
      if (!want_grad) continue;
      // d/dp of the term = -E^T(dphi(E(y - p)))
      for (std::size_t i = 0; i < m; ++i) {
        const float e = resp[i];
        resp[i] = norm == EdgeNorm::Absolute ? static_cast<float>((e > 0.0f) - (e < 0.0f)) : 2.0f * e;
      }
      std::fill(back.begin(), back.end(), 0.0f);
      stencil(resp.data(), s, taps, true, back.data());
      float* g = r.grad.channel(c);
      const auto k = static_cast<float>(-mult * scale);
      for (std::size_t i = 0; i < m; ++i) g[i] += k * back[i];
    }
  }
  return r;
}

double log_softmax_at(const Tensor& logits, std::size_t i, int label) {
  const int c = logits.channels();
  double mx = logits.channel(0)[i];
  for (int k = 1; k < c; ++k) mx = std::max(mx, static_cast<double>(logits.channel(k)[i]));
  double s = 0.0;
  for (int k = 0; k < c; ++k) s += std::exp(logits.channel(k)[i] - mx);
  return logits.channel(label)[i] - mx - std::log(s);
}

void check_seg_pair(const Tensor& logits, const LabelVolume& labels) {
  if (!(logits.spatial() == labels.shape)) throw ShapeError("seg_loss: logits/labels spatial mismatch");
  if (logits.channels() != labels.num_classes) throw ShapeError("seg_loss: class count mismatch");
}

// log(1 + exp(-|x|)) + max(x, 0) - x t, stable for large |x|.
double bce_term(double x, double t) { return std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x))); }

double smooth_l1(double d) {
  const double a = std::abs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

}  // namespace

Tensor edge_response(const Tensor& map, const Kernel3& kernel) {
  Tensor out(map.shape(), 0.0f);
  const Shape3 s = map.spatial();
  const auto taps = taps_of(kernel);
  for (int c = 0; c < map.channels(); ++c) stencil(map.channel(c), s, taps, false, out.channel(c));
  return out;
}

double edge_loss(const SegMap& p, const SegMap& y, const SobelBank& bank, EdgeNorm norm) {
  check_probability_pair(p.data, y.data);
  return edge_eval(p.data, y.data, bank, norm, false).loss;
}

ag::Var edge_loss(const ag::Var& p, const Tensor& y, const SobelBank& bank, EdgeNorm norm) {
  check_probability_pair(p->value, y);
  EdgeEval r = edge_eval(p->value, y, bank, norm, p->requires_grad && ag::grad_enabled());
  return ag::make_result(Tensor::scalar(static_cast<float>(r.loss)), {p},
                         [g = std::move(r.grad)](ag::Node& self) {
                           Tensor& dp = self.parents[0]->grad_ref();
                           const float s = self.grad[0];
                           for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += s * g[i];
                         });
}

double seg_loss(const SegMap& logits, const LabelVolume& labels) {
  check_seg_pair(logits.data, labels);
  const std::size_t m = labels.data.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i) acc -= log_softmax_at(logits.data, i, labels.data[i]);
  return acc / static_cast<double>(m);
}

ag::Var seg_loss(const ag::Var& logits, const LabelVolume& labels) {
  check_seg_pair(logits->value, labels);
  const double value = seg_loss(SegMap{logits->value, SegKind::Logits}, labels);
  return ag::make_result(Tensor::scalar(static_cast<float>(value)), {logits}, [labels](ag::Node& self) {
    const Tensor& x = self.parents[0]->value;
    const Tensor p = nn::softmax_channels(x);
    Tensor& dx = self.parents[0]->grad_ref();
    const std::size_t m = labels.data.size();
    const auto s = static_cast<float>(self.grad[0] / static_cast<double>(m));
    for (int c = 0; c < x.channels(); ++c) {
      const float* pc = p.channel(c);
      float* dc = dx.channel(c);
      for (std::size_t i = 0; i < m; ++i) dc[i] += s * (pc[i] - (labels.data[i] == c ? 1.0f : 0.0f));
    }
  });
}

double bce_loss(std::span<const float> logits, std::span<const std::int8_t> targets) {
  if (logits.size() != targets.size()) throw ShapeError("bce_loss: length mismatch");
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (targets[i] == kIgnore) continue;
    acc += bce_term(logits[i], targets[i] == kPositive ? 1.0 : 0.0);
    ++n;
  }
  if (n == 0) throw ShapeError("bce_loss: every entry is ignored");
  return acc / static_cast<double>(n);
}

double cls_loss(std::span<const float> anchor_logits, std::span<const std::int8_t> anchor_targets,
                std::span<const float> refine_logits, std::span<const std::int8_t> refine_targets) {
  double l = bce_loss(anchor_logits, anchor_targets);
  if (!refine_logits.empty()) l += bce_loss(refine_logits, refine_targets);
  return l;
}

ag::Var bce_loss(const ag::Var& logits, const std::vector<std::int8_t>& targets) {
  const double value = bce_loss(logits->value.values(), targets);
  return ag::make_result(Tensor::scalar(static_cast<float>(value)), {logits}, [targets](ag::Node& self) {
    const Tensor& x = self.parents[0]->value;
    Tensor& dx = self.parents[0]->grad_ref();
    const auto n = static_cast<double>(std::count_if(targets.begin(), targets.end(), [](auto t) { return t != kIgnore; }));
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (targets[i] == kIgnore) continue;
      const double sig = 1.0 / (1.0 + std::exp(-static_cast<double>(x[i])));
      dx[i] += static_cast<float>(self.grad[0] * (sig - (targets[i] == kPositive ? 1.0 : 0.0)) / n);
    }
  });
}

double box_loss(std::span<const float> pred, std::span<const float> target, std::span<const std::uint8_t> positive) {
  if (pred.size() != target.size() || pred.size() != 6 * positive.size()) throw ShapeError("box_loss: length mismatch");
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < positive.size(); ++r) {
    if (!positive[r]) continue;
    for (std::size_t j = 0; j < 6; ++j) acc += smooth_l1(static_cast<double>(pred[6 * r + j]) - target[6 * r + j]);
    ++n;
  }
  if (n == 0) throw ShapeError("box_loss: no positive rows");
  return acc / (6.0 * static_cast<double>(n));
}

ag::Var box_loss(const ag::Var& pred, const std::vector<float>& target) {
  const std::vector<std::uint8_t> all(target.size() / 6, 1);
  const double value = box_loss(pred->value.values(), target, all);
  return ag::make_result(Tensor::scalar(static_cast<float>(value)), {pred}, [target](ag::Node& self) {
    const Tensor& x = self.parents[0]->value;
    Tensor& dx = self.parents[0]->grad_ref();
    const double s = self.grad[0] / static_cast<double>(target.size());
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double d = static_cast<double>(x[i]) - target[i];
      dx[i] += static_cast<float>(s * std::clamp(d, -1.0, 1.0));
    }
  });
}

void LossWeights::validate() const {
  if (box < 0 || cls < 0 || seg < 0 || edge < 0) throw ShapeError("loss weights must be non-negative");
  if (box + cls + seg + edge <= 0) throw ShapeError("loss weights must not all be zero");
}

LossReport total_loss(double l_box, double l_cls, double l_seg, double l_edge, const LossWeights& w,
                      bool edge_enabled) {
  if (!edge_enabled) l_edge = 0.0;
  for (double v : {l_box, l_cls, l_seg, l_edge})
    if (!std::isfinite(v)) throw ShapeError("total_loss: non-finite loss part");
  LossReport r{l_box, l_cls, l_seg, l_edge, 0.0};
  r.total = w.box * l_box + w.cls * l_cls + w.seg * l_seg + (edge_enabled ? w.edge * l_edge : 0.0);
  return r;
}

}  // namespace cfun::loss
