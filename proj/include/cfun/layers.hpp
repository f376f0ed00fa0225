#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "cfun/ops.hpp"
#include "cfun/rng.hpp"

namespace cfun::nn {

/// Ordered, named collection of trainable tensors. Order is creation order and
/// defines the checkpoint layout.
class ParamStore {
 public:
  Var add(const std::string& name, Tensor init);
  [[nodiscard]] Var get(const std::string& name) const;
  [[nodiscard]] bool contains(const std::string& name) const;
  [[nodiscard]] const std::vector<std::pair<std::string, Var>>& params() const { return params_; }
  [[nodiscard]] std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Var>> params_;
};

/// Kaiming-normal kernel (fan-in scaling), zero bias.
struct Conv {
  Var w;
  Var b;  // may be null
  ConvGeometry g;

  Conv() = default;
  Conv(ParamStore& ps, const std::string& name, int cin, int cout, ConvGeometry g, SplitMix64& rng, bool bias = true);
  Var operator()(const Var& x) const { return conv3d(x, w, b, g); }
  [[nodiscard]] int out_channels() const { return w->value.dim(0); }
};

/// Transposed convolution; weight shape (Cin, Cout, k...).
struct Deconv {
  Var w;
  Var b;
  ConvGeometry g;

  Deconv() = default;
  Deconv(ParamStore& ps, const std::string& name, int cin, int cout, ConvGeometry g, SplitMix64& rng);
  Var operator()(const Var& x) const { return deconv3d(x, w, b, g); }
};

/// Instance-style normalization (batch size is always 1) with scale/shift.
struct Norm {
  Var gamma;
  Var beta;

  Norm() = default;
  Norm(ParamStore& ps, const std::string& name, int channels);
  Var operator()(const Var& x) const { return instance_norm(x, gamma, beta); }
};

/// conv -> norm -> relu
struct ConvNormRelu {
  Conv conv;
  Norm norm;

  ConvNormRelu() = default;
  ConvNormRelu(ParamStore& ps, const std::string& name, int cin, int cout, ConvGeometry g, SplitMix64& rng);
  Var operator()(const Var& x) const { return relu(norm(conv(x))); }
};

struct P3DBlockConfig {
  int in_channels = 1;
  int mid_channels = 1;
  int out_channels = 1;
  std::array<int, 3> stride{1, 1, 1};

  void validate() const;
};

/// Pseudo-3D residual bottleneck (serial variant):
///   1x1x1 reduce -> 1x3x3 in-plane -> 3x1x1 axial -> 1x1x1 expand,
/// each followed by norm + relu except the expand (norm only), then a residual
/// add and relu. In-plane stride sits on the 1x3x3 conv, axial stride on the
/// 3x1x1 conv. The shortcut is a strided 1x1x1 projection whenever channels or
/// stride change, identity otherwise.
class P3DBottleneck {
 public:
  P3DBottleneck() = default;
  P3DBottleneck(ParamStore& ps, const std::string& name, const P3DBlockConfig& cfg, SplitMix64& rng);

  Var operator()(const Var& x) const;
  [[nodiscard]] const P3DBlockConfig& config() const { return cfg_; }
  [[nodiscard]] bool has_projection() const { return static_cast<bool>(proj_.w); }

 private:
  P3DBlockConfig cfg_;
  ConvNormRelu reduce_, spatial_, axial_;
  Conv expand_;
  Norm expand_norm_;
  Conv proj_;
};

}  // namespace cfun::nn
