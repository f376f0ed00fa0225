#pragma once

#include "cfun/autograd.hpp"
#include "cfun/box.hpp"
#include "cfun/tensor.hpp"

namespace cfun {

struct RoiAlignSpec {
  Shape3 out_size{32, 32, 32};
  int samples_per_bin = 2;
  void validate() const;
};

/// Trilinear RoI-align of a (C, D, H, W) tensor.
///
/// The box (continuous coordinates, voxel i centered at i + 0.5) is clipped to
/// the source, split into out_size bins, and every bin averages
/// samples_per_bin^3 regularly spaced trilinear samples. No coordinate is
/// quantized. Throws ShapeError if the clipped box has a side shorter than one
/// voxel.
Tensor roi_align(const Tensor& src, const BBox3D& box, const RoiAlignSpec& spec);

/// Differentiable with respect to `src`.
ag::Var roi_align(const ag::Var& src, const BBox3D& box, const RoiAlignSpec& spec);

}  // namespace cfun
