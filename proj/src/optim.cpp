#include "cfun/optim.hpp"

#include <cmath>

#include "cfun/error.hpp"

namespace cfun::nn {

Adam::Adam(const ParamStore& ps, AdamOptions opt) : opt_(opt) {
  for (const auto& [name, p] : ps.params()) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

double Adam::step(ParamStore& ps) {
  const auto& params = ps.params();
  if (params.size() != m_.size()) throw ShapeError("Adam: parameter store changed since construction");
  double sq = 0.0;
  for (const auto& [name, p] : params)
    if (p->has_grad())
      for (float g : p->grad.values()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) return norm;
  const float clip = opt_.clip_norm > 0.0f && norm > opt_.clip_norm ? static_cast<float>(opt_.clip_norm / norm) : 1.0f;

  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(opt_.beta1), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(opt_.beta2), static_cast<double>(t_));
  const auto step_size = static_cast<float>(opt_.lr / bc1);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].second;
    if (!p->has_grad()) continue;
    float* w = p->value.data();
    const float* g = p->grad.data();
    float* m = m_[i].data();
    float* v = v_[i].data();
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      const float gk = g[k] * clip;
      m[k] = opt_.beta1 * m[k] + (1.0f - opt_.beta1) * gk;
      v[k] = opt_.beta2 * v[k] + (1.0f - opt_.beta2) * gk * gk;
      w[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_bc2) + opt_.eps);
    }
  }
  return norm;
}

}  // namespace cfun::nn
