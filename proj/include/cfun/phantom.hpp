#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "cfun/box.hpp"
#include "cfun/volume.hpp"

namespace cfun {

/// Class indices used throughout; 0 is background.
enum Structure : int { kLV = 1, kMyo = 2, kRV = 3, kLA = 4, kRA = 5, kAA = 6, kPA = 7 };
inline constexpr int kNumClasses = 8;
inline constexpr const char* kStructureNames[kNumClasses] = {"BG", "LV", "Myo", "RV", "LA", "RA", "AA", "PA"};

struct PhantomSpec {
  Shape3 shape{96, 128, 128};
  int num_structures = 7;
  double noise_sigma = 0.04;
  // Edge length of the heart frame as a fraction of the smallest volume extent.
  std::pair<double, double> heart_scale_range{0.5, 0.6};
  int clutter_count = 3;
  // Heart center jitter as a fraction of each extent.
  double center_jitter = 0.1;

  void validate() const;
};

/// Mean intensity of each class in a noiseless phantom.
inline constexpr float kClassIntensity[kNumClasses] = {0.05f, 0.85f, 0.45f, 0.72f, 0.62f, 0.55f, 0.95f, 0.35f};

struct PhantomSample {
  Volume image;
  LabelVolume labels;
  BBox3D box;
};

PhantomSample generate_phantom(const PhantomSpec& spec, std::uint64_t seed);

/// Tight half-open box around all voxels with label > 0.
BBox3D ground_truth_box(const LabelVolume& labels);

struct ManifestEntry {
  std::filesystem::path image;   // resolved against the manifest directory
  std::filesystem::path labels;
  BBox3D box;
  std::uint64_t seed = 0;
};

struct Manifest {
  std::vector<ManifestEntry> samples;
};

/// Writes `count` samples with per-sample seed `seed + i` plus `manifest.json`.
/// Returns the manifest path.
std::filesystem::path make_dataset(const PhantomSpec& spec, int count, std::uint64_t seed,
                                   const std::filesystem::path& out_dir);

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

}  // namespace cfun
