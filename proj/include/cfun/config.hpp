#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cfun/detector.hpp"
#include "cfun/losses.hpp"
#include "cfun/unet.hpp"

namespace cfun {

enum class Preset { Desk, Paper };

/// Which tensor the segmentation branch RoI-aligns.
enum class SegInput {
  Image,     // the original volume
  Conv,      // first backbone stage output
  Pyramid,   // finest FPN level
};

enum class Variant { Full, NoEdge, NoRefine, NoEdgeNoRefine, InputIO, InputIC, InputIP };

std::string to_string(Preset p);
std::string to_string(SegInput s);
std::string to_string(Variant v);
std::optional<Preset> parse_preset(const std::string& s);
std::optional<SegInput> parse_seg_input(const std::string& s);
std::optional<Variant> parse_variant(const std::string& s);
/// Comma-separated list of accepted variant names.
std::string variant_names();

struct TrainConfig {
  Preset preset = Preset::Desk;
  Shape3 input_shape{96, 128, 128};
  Shape3 roi_out_size{32, 32, 32};
  int roi_samples_per_bin = 2;
  UnetConfig unet;
  DetectorConfig detector;
  float lr = 1e-3f;
  int batch_size = 1;
  int steps_per_epoch = 32;
  int base_epochs = 72;
  int edge_epochs = 24;
  loss::LossWeights weights;
  std::uint64_t seed = 1;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;
  float clip_norm = 10.0f;
  /// Fraction of phase-1 steps whose segmentation crop uses the jittered
  /// ground-truth box.
  double teacher_forcing = 0.5;
  double teacher_jitter = 0.1;
  /// Each side of the selected box grows by this fraction of its size before cropping.
  double crop_margin = 0.1;
  loss::EdgeNorm edge_norm = loss::EdgeNorm::Absolute;
  bool edge_enabled = true;
  bool refine_enabled = true;
  SegInput seg_input = SegInput::Image;

  static TrainConfig desk();
  static TrainConfig paper();
  static TrainConfig for_preset(Preset p);

  void validate() const;
  [[nodiscard]] int phase1_steps() const { return base_epochs * steps_per_epoch; }
  [[nodiscard]] int total_steps() const { return (base_epochs + edge_epochs) * steps_per_epoch; }
  [[nodiscard]] RoiAlignSpec roi_spec() const { return {roi_out_size, roi_samples_per_bin}; }
  /// Channel count of the tensor fed to the U-net for the configured input path.
  [[nodiscard]] int seg_input_channels() const;
  /// Copy with the ablation switches of `v` applied.
  [[nodiscard]] TrainConfig with_variant(Variant v) const;

  [[nodiscard]] std::string to_json() const;
  /// Starts from the preset named in the document (desk if absent) and
  /// overrides every key present. Unknown keys are rejected.
  static TrainConfig from_json(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

}  // namespace cfun
