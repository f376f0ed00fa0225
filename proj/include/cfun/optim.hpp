#pragma once

#include <vector>

#include "cfun/layers.hpp"

namespace cfun::nn {

struct AdamOptions {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float clip_norm = 10.0f;  // global gradient norm cap; <= 0 disables clipping
};

/// Adam over every parameter of a ParamStore. Parameters without a gradient
/// this step are left untouched (their moments are not decayed either).
class Adam {
 public:
  Adam(const ParamStore& ps, AdamOptions opt);

  /// Applies one update and returns the pre-clipping global gradient norm.
  double step(ParamStore& ps);
  [[nodiscard]] long steps() const { return t_; }

 private:
  AdamOptions opt_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

}  // namespace cfun::nn
