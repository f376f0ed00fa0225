#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cfun/config.hpp"
#include "cfun/phantom.hpp"

namespace cfun {

/// Detector and U-net sharing one parameter store.
class Model {
 public:
  explicit Model(const TrainConfig& cfg);

  [[nodiscard]] const TrainConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  [[nodiscard]] const nn::ParamStore& params() const { return params_; }
  [[nodiscard]] const Detector& detector() const { return detector_; }
  [[nodiscard]] const Unet& unet() const { return unet_; }

  /// Directory with manifest.json, weights.bin and config.json.
  void save(const std::filesystem::path& dir) const;
  static std::unique_ptr<Model> load(const std::filesystem::path& dir);

 private:
  TrainConfig cfg_;
  nn::ParamStore params_;
  Detector detector_;
  Unet unet_;
};

/// A sample brought to the model's input grid.
struct TrainingSample {
  Volume image;
  LabelVolume labels;
  BBox3D box;
};

std::vector<TrainingSample> load_samples(const Manifest& manifest, Shape3 input_shape);

/// Nearest-neighbor crop of `labels` under `box` onto an `out`-sized grid.
LabelVolume crop_labels(const LabelVolume& labels, const BBox3D& box, Shape3 out);

/// Box whose faces are moved independently by up to `fraction` of the box
/// size, clipped to `extent`.
BBox3D jitter_box(const BBox3D& box, double fraction, Shape3 extent, SplitMix64& rng);

struct StepLog {
  int step = 0;
  int phase = 1;
  loss::LossReport report;
};

struct TrainOptions {
  std::filesystem::path loss_csv;  // empty: no log file
  /// Called after every step; for progress display.
  std::function<void(const StepLog&)> on_step;
};

struct TrainResult {
  std::vector<StepLog> log;
  int steps = 0;
};

/// Two-phase joint training of detector and U-net on `samples`. Throws
/// DivergenceError on a non-finite loss.
TrainResult train(Model& model, const std::vector<TrainingSample>& samples, const TrainOptions& opts = {});

/// Writes the `step,phase,l_box,l_cls,l_seg,l_edge,total` CSV.
void write_loss_csv(const std::vector<StepLog>& log, const std::filesystem::path& path);

struct InferResult {
  LabelVolume labels;          // at the input volume's resolution
  Proposal proposal;           // final (refined when enabled) heart box, input coordinates
  Proposal raw_proposal;       // the selected RPN proposal before refinement
  BBox3D crop_box;             // region the segmentation was pasted into
  bool low_confidence = false;
  double seconds = 0.0;        // detection through paste, excluding resampling
  LabelVolume coarse_labels;   // coarsest decoder stage alone, filled on request
};

InferResult infer(const Model& model, const Volume& vol, bool with_coarse_stage = false);

/// 2|A ∩ B| / (|A| + |B|) for class `cls`; 1 when both are empty.
double dice(const LabelVolume& pred, const LabelVolume& gt, int cls);

struct SampleMetrics {
  std::array<double, 7> dice{};
  double iou = 0.0;
  double proposal_iou = 0.0;
  double seconds = 0.0;
  double coarse_mean_dice = 0.0;
};

struct MetricsReport {
  std::array<double, 7> dice{};  // LV, Myo, RV, LA, RA, AA, PA
  double mean_dice = 0.0;
  double mean_iou = 0.0;
  double iou_hit_fraction = 0.0;     // share of samples with IoU >= 0.5
  double refine_not_worse = 0.0;     // share with final IoU >= proposal IoU
  double coarse_mean_dice = 0.0;     // coarsest decoder stage alone
  double mean_seconds = 0.0;
  std::vector<SampleMetrics> samples;

  [[nodiscard]] std::string csv() const;
  [[nodiscard]] std::string json() const;
  /// Header and one row in LV Myo RV LA RA AA PA Average order.
  [[nodiscard]] std::string table() const;
};

/// Per-sample prediction: labels, detected box, seconds.
struct Prediction {
  LabelVolume labels;
  BBox3D box;
  BBox3D proposal_box;
  double seconds = 0.0;
  std::optional<LabelVolume> coarse_labels;
};
using Predictor = std::function<Prediction(const Volume& image, const LabelVolume& truth, const BBox3D& truth_box)>;

MetricsReport evaluate(const Manifest& manifest, const Predictor& predict);
MetricsReport evaluate(const Model& model, const Manifest& manifest);
/// Scores the ground truth against itself; every score is 1.
MetricsReport evaluate_ground_truth(const Manifest& manifest);

struct AblationResult {
  Variant variant = Variant::Full;
  int steps = 0;
  MetricsReport report;
};

AblationResult ablate(Variant variant, const TrainConfig& base, const Manifest& train_set, const Manifest& test_set,
                      const TrainOptions& opts = {});

}  // namespace cfun
