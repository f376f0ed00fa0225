#include "cfun/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfun/error.hpp"
#include "cfun/losses.hpp"

namespace cfun {

using nn::ConvGeometry;

void DetectorConfig::validate() const {
  if (in_channels < 1 || stem_channels < 1 || fpn_channels < 1) throw ShapeError("detector channels must be >= 1");
  if (stage_channels.empty()) throw ShapeError("detector needs at least one backbone stage");
  for (int c : stage_channels)
    if (c < 2) throw ShapeError("detector stage channels must be >= 2");
  if (anchor_scales.empty()) throw ShapeError("anchor scales must not be empty");
  for (double s : anchor_scales)
    if (!(s > 0.0)) throw ShapeError("anchor scales must be positive");
  if (!(negative_iou < positive_iou)) throw ShapeError("negative IoU threshold must be below the positive one");
  if (!(neg_per_pos >= 0.0)) throw ShapeError("neg_per_pos must be >= 0");
  if (!(hard_negative_fraction >= 0.0 && hard_negative_fraction <= 1.0))
    throw ShapeError("hard_negative_fraction must be in [0, 1]");
  if (!(objectness_prior > 0.0 && objectness_prior < 1.0)) throw ShapeError("objectness_prior must be in (0, 1)");
  if (pre_nms_top_k < 1) throw ShapeError("pre_nms_top_k must be >= 1");
  if (!(nms_iou > 0.0 && nms_iou < 1.0)) throw ShapeError("nms_iou must be in (0, 1)");
  if (refine_grid < 1) throw ShapeError("refine_grid must be >= 1");
}

void DetectorConfig::check_input(Shape3 s) const {
  const int f = level_stride(num_levels() - 1);
  if (s.d % f || s.h % f || s.w % f)
    throw ShapeError("detector input " + s.str() + " is not divisible by " + std::to_string(f));
}

AnchorSet generate_anchors(const std::vector<Shape3>& level_shapes, const std::vector<int>& strides,
                           const std::vector<double>& scales) {
  if (scales.empty()) throw ShapeError("generate_anchors: empty scales");
  if (level_shapes.size() != strides.size()) throw ShapeError("generate_anchors: one stride per level required");
  AnchorSet a;
  for (std::size_t l = 0; l < level_shapes.size(); ++l) {
    a.level_begin.push_back(a.boxes.size());
    const Shape3 s = level_shapes[l];
    const double st = strides[l];
    for (int z = 0; z < s.d; ++z)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x)
          for (double sc : scales) {
            a.boxes.push_back(BBox3D::from_center((z + 0.5) * st, (y + 0.5) * st, (x + 0.5) * st, sc, sc, sc));
            a.level_of.push_back(static_cast<int>(l));
          }
  }
  a.level_begin.push_back(a.boxes.size());
  return a;
}

namespace {

std::vector<std::size_t> score_order(const std::vector<Proposal>& p) {
  std::vector<std::size_t> idx(p.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p[a].score > p[b].score; });
  return idx;
}

float sigmoid(float v) { return 1.0f / (1.0f + std::exp(-v)); }

}  // namespace

std::vector<Proposal> nms_3d(const std::vector<Proposal>& proposals, double iou_thresh) {
  std::vector<Proposal> kept;
  for (std::size_t i : score_order(proposals)) {
    const Proposal& p = proposals[i];
    const bool suppressed =
        std::any_of(kept.begin(), kept.end(), [&](const Proposal& k) { return iou_3d(k.box, p.box) > iou_thresh; });
    if (!suppressed) kept.push_back(p);
  }
  return kept;
}

Selection select_heart_box(const std::vector<Proposal>& proposals, double threshold, double nms_iou) {
  if (proposals.empty()) throw ShapeError("select_heart_box: no proposals");
  const auto kept = nms_3d(proposals, nms_iou);
  Selection s;
  s.proposal = kept.front();
  s.low_confidence = s.proposal.score < threshold;
  return s;
}

AnchorTargets assign_anchor_targets(const AnchorSet& anchors, const BBox3D& gt, const DetectorConfig& cfg,
                                    SplitMix64& rng, std::span<const float> scores) {
  if (anchors.size() == 0) throw ShapeError("assign_anchor_targets: empty anchor set");
  if (!scores.empty() && scores.size() != anchors.size())
    throw ShapeError("assign_anchor_targets: " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(anchors.size()) + " anchors");
  AnchorTargets t;
  t.labels.assign(anchors.size(), loss::kIgnore);
  t.deltas.resize(anchors.size());
  std::vector<std::size_t> neg_pool;
  std::size_t best = 0;
  double best_iou = -1.0;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const double v = iou_3d(anchors.boxes[i], gt);
    if (v > best_iou) {
      best_iou = v;
      best = i;
    }
    if (v >= cfg.positive_iou)
      t.labels[i] = loss::kPositive;
    else if (v < cfg.negative_iou)
      neg_pool.push_back(i);
  }
  if (t.labels[best] != loss::kPositive) {
    t.labels[best] = loss::kPositive;
    std::erase(neg_pool, best);
  }
  for (std::size_t i = 0; i < anchors.size(); ++i)
    if (t.labels[i] == loss::kPositive) {
      t.positives.push_back(i);
      t.deltas[i] = encode_box(anchors.boxes[i], gt);
    }

  const auto want = static_cast<std::size_t>(std::ceil(static_cast<double>(t.positives.size()) * cfg.neg_per_pos));
  const std::size_t n = std::min(want, neg_pool.size());
  std::size_t hard = 0;
  if (!scores.empty()) hard = static_cast<std::size_t>(std::round(static_cast<double>(n) * cfg.hard_negative_fraction));
  if (hard > 0) {
    std::partial_sort(neg_pool.begin(), neg_pool.begin() + static_cast<std::ptrdiff_t>(hard), neg_pool.end(),
                      [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  }
  for (std::size_t i = hard; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(neg_pool.size() - i));
    std::swap(neg_pool[i], neg_pool[j]);
  }
  t.negatives.assign(neg_pool.begin(), neg_pool.begin() + static_cast<std::ptrdiff_t>(n));
  std::sort(t.negatives.begin(), t.negatives.end());
  for (std::size_t i : t.negatives) t.labels[i] = loss::kNegative;
  return t;
}

std::pair<int, std::size_t> RpnOutput::score_ref(std::size_t anchor) const {
  const auto it = std::upper_bound(level_begin.begin(), level_begin.end(), anchor);
  const int l = static_cast<int>(it - level_begin.begin()) - 1;
  const std::size_t local = anchor - level_begin[static_cast<std::size_t>(l)];
  const std::size_t cells = scores[static_cast<std::size_t>(l)]->value.channel_size();
  const std::size_t cell = local / static_cast<std::size_t>(anchors_per_cell);
  const std::size_t a = local % static_cast<std::size_t>(anchors_per_cell);
  return {l, a * cells + cell};
}

std::pair<int, std::size_t> RpnOutput::delta_ref(std::size_t anchor, int k) const {
  const auto it = std::upper_bound(level_begin.begin(), level_begin.end(), anchor);
  const int l = static_cast<int>(it - level_begin.begin()) - 1;
  const std::size_t local = anchor - level_begin[static_cast<std::size_t>(l)];
  const std::size_t cells = deltas[static_cast<std::size_t>(l)]->value.channel_size();
  const std::size_t cell = local / static_cast<std::size_t>(anchors_per_cell);
  const std::size_t a = local % static_cast<std::size_t>(anchors_per_cell);
  return {l, (a * 6 + static_cast<std::size_t>(k)) * cells + cell};
}

std::vector<float> RpnOutput::flat_scores() const {
  std::vector<float> out(level_begin.back());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto [l, k] = score_ref(i);
    out[i] = scores[static_cast<std::size_t>(l)]->value[k];
  }
  return out;
}

std::vector<BoxDelta> RpnOutput::flat_deltas() const {
  std::vector<BoxDelta> out(level_begin.back());
  for (std::size_t i = 0; i < out.size(); ++i)
    for (int k = 0; k < 6; ++k) {
      const auto [l, off] = delta_ref(i, k);
      out[i][k] = deltas[static_cast<std::size_t>(l)]->value[off];
    }
  return out;
}

int refine_level(const BBox3D& box, int num_levels) {
  const double side = std::min({box.size(0), box.size(1), box.size(2)});
  int best = 0;
  for (int l = 0; l < num_levels; ++l)
    if (DetectorConfig::level_stride(l) <= side) best = l;
  return best;
}

Detector::Detector(nn::ParamStore& ps, const DetectorConfig& cfg, SplitMix64& rng) : cfg_(cfg) {
  cfg.validate();
  const auto k1 = ConvGeometry::cube(1, 1, 0);
  const auto k3 = ConvGeometry::cube(3, 1, 1);
  stem_ = nn::ConvNormRelu(ps, "det.stem", cfg.in_channels, cfg.stem_channels, ConvGeometry::cube(3, 2, 1), rng);
  int prev = cfg.stem_channels;
  for (int l = 0; l < cfg.num_levels(); ++l) {
    const int out = cfg.stage_channels[static_cast<std::size_t>(l)];
    nn::P3DBlockConfig bc{prev, std::max(1, out / 2), out, {2, 2, 2}};
    stages_.emplace_back(ps, "det.stage" + std::to_string(l), bc, rng);
    prev = out;
  }
  for (int l = 0; l < cfg.num_levels(); ++l) {
    const std::string n = "det.fpn" + std::to_string(l);
    lateral_.emplace_back(ps, n + ".lateral", cfg.stage_channels[static_cast<std::size_t>(l)], cfg.fpn_channels, k1,
                          rng);
    smooth_.emplace_back(ps, n + ".smooth", cfg.fpn_channels, cfg.fpn_channels, k3, rng);
  }
  const int a = cfg.anchors_per_cell();
  rpn_shared_ = nn::ConvNormRelu(ps, "det.rpn.shared", cfg.fpn_channels, cfg.fpn_channels, k3, rng);
  rpn_cls_ = nn::Conv(ps, "det.rpn.cls", cfg.fpn_channels, a, k1, rng);
  rpn_cls_.b->value.fill(static_cast<float>(std::log(cfg.objectness_prior / (1.0 - cfg.objectness_prior))));
  rpn_reg_ = nn::Conv(ps, "det.rpn.reg", cfg.fpn_channels, 6 * a, k1, rng);

  refine_conv_ = nn::ConvNormRelu(ps, "det.refine.conv", cfg.fpn_channels, cfg.fpn_channels,
                                  ConvGeometry::cube(3, 2, 1), rng);
  const int g = ConvGeometry::cube(3, 2, 1).output({cfg.refine_grid, cfg.refine_grid, cfg.refine_grid}).d;
  refine_fc_ = nn::Conv(ps, "det.refine.fc", cfg.fpn_channels, 7, ConvGeometry::cube(g, 1, 0), rng);
}

FeaturePyramid Detector::backbone_fpn_forward(const ag::Var& image) const {
  if (image->value.channels() != cfg_.in_channels)
    throw ShapeError("detector expects " + std::to_string(cfg_.in_channels) + " input channels");
  cfg_.check_input(image->value.spatial());
  FeaturePyramid pyr;
  ag::Var h = stem_(image);
  for (const auto& s : stages_) {
    h = s(h);
    pyr.stages.push_back(h);
  }
  const int n = cfg_.num_levels();
  std::vector<ag::Var> merged(static_cast<std::size_t>(n));
  for (int l = n - 1; l >= 0; --l) {
    const auto i = static_cast<std::size_t>(l);
    ag::Var lat = lateral_[i](pyr.stages[i]);
    merged[i] = l == n - 1 ? lat : nn::add(lat, nn::upsample_nearest(merged[i + 1], {2, 2, 2}));
  }
  for (int l = 0; l < n; ++l) pyr.levels.push_back(smooth_[static_cast<std::size_t>(l)](merged[static_cast<std::size_t>(l)]));
  return pyr;
}

RpnOutput Detector::rpn_forward(const FeaturePyramid& pyr) const {
  RpnOutput out;
  out.anchors_per_cell = cfg_.anchors_per_cell();
  std::size_t begin = 0;
  for (const auto& lv : pyr.levels) {
    if (lv->value.channels() != cfg_.fpn_channels) throw ShapeError("rpn_forward: pyramid channel mismatch");
    ag::Var h = rpn_shared_(lv);
    out.scores.push_back(rpn_cls_(h));
    out.deltas.push_back(rpn_reg_(h));
    out.level_begin.push_back(begin);
    begin += lv->value.channel_size() * static_cast<std::size_t>(out.anchors_per_cell);
  }
  out.level_begin.push_back(begin);
  return out;
}

RefineOutput Detector::refine_head(const ag::Var& roi_feat) const {
  const int g = cfg_.refine_grid;
  if (roi_feat->value.rank() != 4 || roi_feat->value.channels() != cfg_.fpn_channels ||
      roi_feat->value.spatial() != Shape3{g, g, g})
    throw ShapeError("refine_head expects (" + std::to_string(cfg_.fpn_channels) + "," + std::to_string(g) + "," +
                     std::to_string(g) + "," + std::to_string(g) + "), got " + roi_feat->value.shape_str());
  ag::Var o = refine_fc_(refine_conv_(roi_feat));
  RefineOutput r;
  r.logit = nn::gather({o}, {{0, 0}});
  r.delta = nn::gather({o}, {{0, 1}, {0, 2}, {0, 3}, {0, 4}, {0, 5}, {0, 6}});
  return r;
}

RefineOutput Detector::refine(const FeaturePyramid& pyr, const BBox3D& box) const {
  const int l = refine_level(box, static_cast<int>(pyr.levels.size()));
  const double s = DetectorConfig::level_stride(l);
  const BBox3D scaled = fit_box({box.z1 / s, box.y1 / s, box.x1 / s, box.z2 / s, box.y2 / s, box.x2 / s}, 1.0,
                                pyr.levels[static_cast<std::size_t>(l)]->value.spatial());
  const int g = cfg_.refine_grid;
  return refine_head(roi_align(pyr.levels[static_cast<std::size_t>(l)], scaled, RoiAlignSpec{{g, g, g}, 2}));
}

AnchorSet Detector::anchors_for(const FeaturePyramid& pyr) const {
  std::vector<Shape3> shapes;
  std::vector<int> strides;
  for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
    shapes.push_back(pyr.levels[l]->value.spatial());
    strides.push_back(DetectorConfig::level_stride(static_cast<int>(l)));
  }
  return generate_anchors(shapes, strides, cfg_.anchor_scales);
}

std::vector<Proposal> Detector::proposals(const RpnOutput& rpn, const AnchorSet& anchors, Shape3 extent) const {
  if (anchors.size() != rpn.level_begin.back()) throw ShapeError("proposals: RPN output does not match anchor set");
  const auto scores = rpn.flat_scores();
  std::vector<Proposal> out;
  for (std::size_t l = 0; l + 1 < rpn.level_begin.size(); ++l) {
    std::vector<std::size_t> idx(rpn.level_begin[l + 1] - rpn.level_begin[l]);
    std::iota(idx.begin(), idx.end(), rpn.level_begin[l]);
    const std::size_t k = std::min(idx.size(), static_cast<std::size_t>(cfg_.pre_nms_top_k));
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t i = idx[j];
      BoxDelta d;
      for (int c = 0; c < 6; ++c) {
        const auto [lv, off] = rpn.delta_ref(i, c);
        d[c] = rpn.deltas[static_cast<std::size_t>(lv)]->value[off];
      }
      const BBox3D b = clip_box(decode_box(anchors.boxes[i], d), extent);
      if (b.size(0) < 1.0 || b.size(1) < 1.0 || b.size(2) < 1.0) continue;
      out.push_back({b, sigmoid(scores[i])});
    }
  }
  return out;
}

}  // namespace cfun
