#pragma once

#include <cstdint>
#include <functional>

#include "cfun/autograd.hpp"

namespace cfun::nn {

struct GradCheckOptions {
  float eps = 1e-3f;
  int max_samples = 48;  // coordinates compared; all of them when the leaf is smaller
  std::uint64_t seed = 1;
  // Coordinates whose one-sided slopes differ by more than this (relative to
  // max(1, |numeric|)) straddle a kink and are skipped; 0 checks every one.
  double kink_gap = 2e-2;
};

/// Compares the reverse-mode gradient of the scalar `f()` with respect to the
/// leaf `x` against central differences at sampled coordinates.
///
/// Returns max |analytic - numeric| / max(1, |numeric|) over the smooth
/// coordinates, or infinity when fewer than half of them are smooth. `f` must
/// rebuild its graph from `x->value` on every call. Throws ShapeError on
/// non-finite gradients, a non-scalar f or eps outside [1e-4, 1e-2].
double grad_check(const std::function<ag::Var()>& f, const ag::Var& x, const GradCheckOptions& opt = {});

}  // namespace cfun::nn
