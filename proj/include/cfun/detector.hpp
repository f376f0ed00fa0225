#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cfun/box.hpp"
#include "cfun/layers.hpp"
#include "cfun/roi_align.hpp"

namespace cfun {

struct DetectorConfig {
  int in_channels = 1;
  int stem_channels = 8;
  std::vector<int> stage_channels{16, 32, 64};  // outputs at strides 4, 8, 16
  int fpn_channels = 16;
  std::vector<double> anchor_scales{24.0, 40.0};
  double positive_iou = 0.5;
  double negative_iou = 0.1;
  /// Sampled negatives per positive. The single-object setting keeps fewer
  /// negatives than positives.
  double neg_per_pos = 0.5;
  /// Share of the sampled negatives taken as the highest-scoring ones when
  /// current scores are supplied; the rest are drawn uniformly.
  double hard_negative_fraction = 0.5;
  /// Initial objectness probability. The classifier bias starts at its logit,
  /// so an inactive feature reads as background.
  double objectness_prior = 0.01;
  int pre_nms_top_k = 100;
  double nms_iou = 0.3;
  double score_threshold = 0.5;
  int refine_grid = 7;

  void validate() const;
  [[nodiscard]] int num_levels() const { return static_cast<int>(stage_channels.size()); }
  [[nodiscard]] int anchors_per_cell() const { return static_cast<int>(anchor_scales.size()); }
  /// Stride of pyramid level `l` relative to the detector input.
  [[nodiscard]] static int level_stride(int l) { return 4 << l; }
  /// Throws ShapeError unless every dim is divisible by the coarsest stride.
  void check_input(Shape3 s) const;
};

struct FeaturePyramid {
  std::vector<ag::Var> levels;  // strides 4, 8, 16, ...
  std::vector<ag::Var> stages;  // backbone outputs at the same strides
};

struct AnchorSet {
  std::vector<BBox3D> boxes;
  std::vector<int> level_of;
  std::vector<std::size_t> level_begin;  // first anchor index per level, plus a final end marker

  [[nodiscard]] std::size_t size() const { return boxes.size(); }
};

/// Level cells are traversed z-major; each cell emits one cube per scale.
AnchorSet generate_anchors(const std::vector<Shape3>& level_shapes, const std::vector<int>& strides,
                           const std::vector<double>& scales);

struct Proposal {
  BBox3D box;
  double score = 0.0;
};

/// Greedy suppression in descending score order (ties keep the lower index);
/// a box is dropped when its IoU with a kept box exceeds `iou_thresh`.
std::vector<Proposal> nms_3d(const std::vector<Proposal>& proposals, double iou_thresh);

struct Selection {
  Proposal proposal;
  bool low_confidence = false;
};

/// NMS then the single best proposal. Throws ShapeError on an empty list.
Selection select_heart_box(const std::vector<Proposal>& proposals, double threshold = 0.5,
                           double nms_iou = 0.3);

struct AnchorTargets {
  std::vector<std::int8_t> labels;     // loss::kPositive / kNegative / kIgnore per anchor
  std::vector<BoxDelta> deltas;        // encode_box(anchor, gt), meaningful for positives
  std::vector<std::size_t> positives;  // indices, ascending
  std::vector<std::size_t> negatives;  // sampled indices, ascending
};

/// `scores` (optional, one logit per anchor) enables hard-negative sampling.
AnchorTargets assign_anchor_targets(const AnchorSet& anchors, const BBox3D& gt, const DetectorConfig& cfg,
                                    SplitMix64& rng, std::span<const float> scores = {});

struct RpnOutput {
  std::vector<ag::Var> scores;  // per level (A, d, h, w)
  std::vector<ag::Var> deltas;  // per level (6A, d, h, w), channel a * 6 + k

  /// Flat per-anchor views in generate_anchors order.
  [[nodiscard]] std::vector<float> flat_scores() const;
  [[nodiscard]] std::vector<BoxDelta> flat_deltas() const;
  /// (level, element offset) references for anchor logit / delta coordinate,
  /// usable with nn::gather over `scores` / `deltas`.
  [[nodiscard]] std::pair<int, std::size_t> score_ref(std::size_t anchor) const;
  [[nodiscard]] std::pair<int, std::size_t> delta_ref(std::size_t anchor, int k) const;

  std::vector<std::size_t> level_begin;
  int anchors_per_cell = 1;
};

struct RefineOutput {
  ag::Var logit;  // shape (1)
  ag::Var delta;  // shape (6)
};

/// Pyramid level whose stride is the largest one not exceeding the box's
/// shortest side (the finest level if none qualifies).
int refine_level(const BBox3D& box, int num_levels);

/// Backbone (stem + P3D stages), FPN, shared RPN head and the box refine head.
class Detector {
 public:
  Detector() = default;
  Detector(nn::ParamStore& ps, const DetectorConfig& cfg, SplitMix64& rng);

  [[nodiscard]] FeaturePyramid backbone_fpn_forward(const ag::Var& image) const;
  [[nodiscard]] RpnOutput rpn_forward(const FeaturePyramid& pyr) const;
  /// `roi_feat` must have shape (fpn_channels, g, g, g) with g = refine_grid.
  [[nodiscard]] RefineOutput refine_head(const ag::Var& roi_feat) const;
  /// RoI-aligns the refine level under `box` and runs the refine head.
  [[nodiscard]] RefineOutput refine(const FeaturePyramid& pyr, const BBox3D& box) const;

  [[nodiscard]] AnchorSet anchors_for(const FeaturePyramid& pyr) const;
  /// Top-k per level, decoded and clipped to `extent`, scores through a sigmoid.
  [[nodiscard]] std::vector<Proposal> proposals(const RpnOutput& rpn, const AnchorSet& anchors,
                                                Shape3 extent) const;

  [[nodiscard]] const DetectorConfig& config() const { return cfg_; }

 private:
  DetectorConfig cfg_;
  nn::ConvNormRelu stem_;
  std::vector<nn::P3DBottleneck> stages_;
  std::vector<nn::Conv> lateral_;
  std::vector<nn::Conv> smooth_;
  nn::ConvNormRelu rpn_shared_;
  nn::Conv rpn_cls_, rpn_reg_;
  nn::ConvNormRelu refine_conv_;
  nn::Conv refine_fc_;
};

}  // namespace cfun
