#pragma once

#include <vector>

#include "cfun/layers.hpp"
#include "cfun/volume.hpp"

namespace cfun {

struct UnetConfig {
  int in_channels = 1;
  int base_channels = 8;
  int depth = 3;  // number of stride-2 downsamplings
  int num_classes = 8;
  int final_channels = 8;  // width of the 2x upscaled head

  void validate() const;
  /// Throws ShapeError unless every spatial dim is divisible by 2^depth.
  void check_input(Shape3 s) const;
};

struct UnetOutput {
  ag::Var logits;                   // (classes, 2D, 2H, 2W), the merged prediction
  std::vector<ag::Var> stage_logits;  // coarse to fine, each at its own resolution; last is the 2x head
};

/// Resizes every stage map to `out` (corner-aligned trilinear) and sums them.
ag::Var deep_supervision_merge(const std::vector<ag::Var>& stage_logits, Shape3 out, int num_classes = 8);

/// Per-voxel softmax of a logit map.
SegMap predict_probs(const SegMap& logits);

/// Modified 3D U-net: residual encoder stages with stride-2 downsampling,
/// transposed-conv decoder with skip concatenation, a 1x1x1 logit projection
/// per decoder resolution, and an extra stride-2 deconv + 3x3x3 conv head that
/// doubles the output grid relative to the input.
class Unet {
 public:
  Unet() = default;
  Unet(nn::ParamStore& ps, const UnetConfig& cfg, SplitMix64& rng);

  [[nodiscard]] UnetOutput forward(const ag::Var& crop) const;
  [[nodiscard]] const UnetConfig& config() const { return cfg_; }

 private:
  struct ResStage {
    nn::ConvNormRelu entry;  // stride 1 on the first stage, stride 2 afterwards
    nn::ConvNormRelu inner;
    nn::Conv out_conv;
    nn::Norm out_norm;
  };
  struct UpStage {
    nn::Deconv up;
    nn::ConvNormRelu fuse;
    nn::Conv head;
  };

  UnetConfig cfg_;
  std::vector<ResStage> encoder_;  // depth + 1 stages, the last is the bottleneck
  std::vector<UpStage> decoder_;   // deepest first
  nn::Deconv final_up_;
  nn::ConvNormRelu final_conv_;
  nn::Conv final_head_;
};

}  // namespace cfun
