#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "cfun/autograd.hpp"
#include "cfun/volume.hpp"

namespace cfun::loss {

/// 3x3x3 kernel indexed [(a * 3 + b) * 3 + c] for offsets (z, y, x) in {-1, 0, 1}.
using Kernel3 = std::array<float, 27>;

/// Outer slice of the +z Sobel kernel (the smoothing profile over y, x). The
/// opposite outer slice is its negation and the middle slice is zero.
inline constexpr float kSobelUp[3][3] = {{1.0f, 2.0f, 1.0f}, {2.0f, 4.0f, 2.0f}, {1.0f, 2.0f, 1.0f}};

struct SobelBank {
  std::vector<Kernel3> kernels;  // +z, +y, +x, -z, -y, -x
};

SobelBank sobel_bank();
/// Bank built from an arbitrary outer-slice profile. Used to exercise the
/// verification suite with a deliberately wrong constant.
SobelBank sobel_bank_from(const float (&up)[3][3]);

/// Per-channel cross-correlation with `kernel`, stride 1, zero padding 1.
Tensor edge_response(const Tensor& map, const Kernel3& kernel);

enum class EdgeNorm {
  Absolute,  // |E_k(y) - E_k(p)| per voxel
  Squared,   // (E_k(y) - E_k(p))^2 per voxel
};

/// (1 / (C K M)) sum_c sum_k sum_m |E_k(y)^c_m - E_k(p)^c_m|.
double edge_loss(const SegMap& p, const SegMap& y, const SobelBank& bank, EdgeNorm norm = EdgeNorm::Absolute);
/// Differentiable with respect to the probability map `p`.
ag::Var edge_loss(const ag::Var& p, const Tensor& y, const SobelBank& bank, EdgeNorm norm = EdgeNorm::Absolute);

/// Mean over voxels of the softmax cross-entropy against integer labels.
double seg_loss(const SegMap& logits, const LabelVolume& labels);
ag::Var seg_loss(const ag::Var& logits, const LabelVolume& labels);

/// Anchor label convention for classification targets.
inline constexpr std::int8_t kPositive = 1;
inline constexpr std::int8_t kNegative = -1;
inline constexpr std::int8_t kIgnore = 0;

/// Mean binary cross-entropy over non-ignored entries.
double bce_loss(std::span<const float> logits, std::span<const std::int8_t> targets);
/// RPN term plus the refine head's term (skipped when `refine_logits` is empty).
double cls_loss(std::span<const float> anchor_logits, std::span<const std::int8_t> anchor_targets,
                std::span<const float> refine_logits = {}, std::span<const std::int8_t> refine_targets = {});
ag::Var bce_loss(const ag::Var& logits, const std::vector<std::int8_t>& targets);

/// Mean over positives and the 6 coordinates of smooth-L1(pred - target),
/// transition point 1. Rows are 6-vectors laid out contiguously.
double box_loss(std::span<const float> pred, std::span<const float> target, std::span<const std::uint8_t> positive);
/// `pred` holds only the positive rows (6 per row); `target` matches it.
ag::Var box_loss(const ag::Var& pred, const std::vector<float>& target);

struct LossWeights {
  float box = 2.0f;
  float cls = 2.0f;
  float seg = 2.0f;
  float edge = 1.0f;
  void validate() const;
};

struct LossReport {
  double l_box = 0.0;
  double l_cls = 0.0;
  double l_seg = 0.0;
  double l_edge = 0.0;
  double total = 0.0;
};

/// Combines the parts; with the edge head disabled l_edge is forced to 0.
LossReport total_loss(double l_box, double l_cls, double l_seg, double l_edge, const LossWeights& w,
                      bool edge_enabled = true);

}  // namespace cfun::loss
