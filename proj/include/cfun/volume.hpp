#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "cfun/tensor.hpp"

namespace cfun {

/// Dense CT-like intensity grid. Spacing is mm per voxel along (z, y, x).
struct Volume {
  Shape3 shape;
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
  std::vector<float> data;

  Volume() = default;
  Volume(Shape3 s, float fill = 0.0f, std::array<float, 3> sp = {1.0f, 1.0f, 1.0f});

  float& at(int z, int y, int x) { return data[index(z, y, x)]; }
  [[nodiscard]] float at(int z, int y, int x) const { return data[index(z, y, x)]; }
  [[nodiscard]] std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * shape.h + y) * shape.w + x;
  }
  /// Copy into a single-channel (1, D, H, W) tensor.
  [[nodiscard]] Tensor4 to_tensor() const;
  /// Throws ShapeError/FormatError if the type invariants do not hold.
  void validate() const;
};

/// Integer class grid; every value lies in [0, num_classes).
struct LabelVolume {
  Shape3 shape;
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
  int num_classes = 8;
  std::vector<std::uint8_t> data;

  LabelVolume() = default;
  LabelVolume(Shape3 s, int classes, std::uint8_t fill = 0);

  std::uint8_t& at(int z, int y, int x) { return data[index(z, y, x)]; }
  [[nodiscard]] std::uint8_t at(int z, int y, int x) const { return data[index(z, y, x)]; }
  [[nodiscard]] std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * shape.h + y) * shape.w + x;
  }
  void validate() const;
};

enum class SegKind { Logits, Probabilities, OneHot };

/// Per-class map of shape (C, D, H, W).
struct SegMap {
  Tensor4 data;
  SegKind kind = SegKind::Logits;

  [[nodiscard]] int num_classes() const { return data.channels(); }
  [[nodiscard]] Shape3 spatial() const { return data.spatial(); }
  /// Checks the probability / one-hot invariants for the declared kind.
  void validate() const;
};

// Raw file format: "CFUNVOL1", u32 dtype (1 = f32, 2 = u8 labels), u32 D,H,W,
// f32 spacing z,y,x, then the z-major little-endian payload. Label files end
// with a u32 num_classes.
inline constexpr char kVolumeMagic[8] = {'C', 'F', 'U', 'N', 'V', 'O', 'L', '1'};
inline constexpr std::uint32_t kDtypeFloat32 = 1;
inline constexpr std::uint32_t kDtypeLabel8 = 2;

Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& vol, const std::filesystem::path& path);
LabelVolume load_labels(const std::filesystem::path& path);
void save_labels(const LabelVolume& labels, const std::filesystem::path& path);

/// Source coordinate of output index `i` under corner-aligned mapping.
/// A single-sample output maps to the source center.
double corner_aligned_coord(int i, int n_in, int n_out);

Volume resample_trilinear(const Volume& vol, Shape3 target);
LabelVolume resample_nearest(const LabelVolume& labels, Shape3 target);

Volume normalize_intensity(const Volume& vol, float lo = -300.0f, float hi = 500.0f);

SegMap one_hot(const LabelVolume& labels);
/// Per-voxel argmax over channels; ties resolve to the lowest class index.
LabelVolume argmax(const SegMap& map);

}  // namespace cfun
