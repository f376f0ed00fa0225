#pragma once

#include <array>
#include <vector>

#include "cfun/autograd.hpp"
#include "cfun/tensor.hpp"

namespace cfun::nn {

using ag::Var;

struct ConvGeometry {
  std::array<int, 3> kernel{3, 3, 3};
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> padding{1, 1, 1};

  static ConvGeometry cube(int k, int s, int p) { return {{k, k, k}, {s, s, s}, {p, p, p}}; }
  [[nodiscard]] int kernel_volume() const { return kernel[0] * kernel[1] * kernel[2]; }
  /// floor((N + 2p - k) / s) + 1 per axis.
  [[nodiscard]] Shape3 output(Shape3 in) const;
  /// (N - 1) s - 2p + k per axis.
  [[nodiscard]] Shape3 transposed_output(Shape3 in) const;
  [[nodiscard]] bool is_pointwise() const;
};

// Plain tensor kernels. Convolution weights have shape (Cout, Cin, kz, ky, kx)
// and use cross-correlation semantics. `bias` may be null.
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvGeometry& g);
/// Transposed convolution: the adjoint of conv3d with the same weights, so the
/// weight shape is (Cin, Cout, kz, ky, kx) from this op's point of view.
Tensor deconv3d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvGeometry& g);

// Differentiable ops on graph values.
Var conv3d(const Var& x, const Var& w, const Var& bias, const ConvGeometry& g);
Var deconv3d(const Var& x, const Var& w, const Var& bias, const ConvGeometry& g);
/// Per-channel normalization over the spatial axes followed by an affine map.
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f);
Var relu(const Var& x);
Var add(const Var& a, const Var& b);
Var scale(const Var& x, float s);
Var concat_channels(const Var& a, const Var& b);
Var upsample_nearest(const Var& x, std::array<int, 3> factor);
/// Corner-aligned trilinear resize to `target` (separable linear interpolation).
Var resize_trilinear(const Var& x, Shape3 target);
/// Per-voxel softmax over channels.
Var softmax_channels(const Var& x);
Var sum(const Var& x);
/// Rank-1 tensor of selected elements: entry i is sources[refs[i].first]->value[refs[i].second].
Var gather(const std::vector<Var>& sources, const std::vector<std::pair<int, std::size_t>>& refs);
/// Σ weights[i] * terms[i] over scalar terms.
Var weighted_sum(const std::vector<Var>& terms, const std::vector<float>& weights);

// Non-differentiable helpers shared with losses and inference.
Tensor softmax_channels(const Tensor& logits);
Tensor resize_trilinear(const Tensor& x, Shape3 target);

}  // namespace cfun::nn
