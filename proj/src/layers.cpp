#include "cfun/layers.hpp"

#include <cmath>

#include "cfun/error.hpp"

namespace cfun::nn {

Var ParamStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw ShapeError("duplicate parameter name " + name);
  auto v = ag::parameter(std::move(init));
  params_.emplace_back(name, v);
  return v;
}

Var ParamStore::get(const std::string& name) const {
  for (const auto& [n, v] : params_)
    if (n == name) return v;
  throw ShapeError("unknown parameter " + name);
}

bool ParamStore::contains(const std::string& name) const {
  for (const auto& p : params_)
    if (p.first == name) return true;
  return false;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.second->value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.second->grad = Tensor();
}

namespace {

Tensor kaiming(std::vector<int> shape, int fan_in, SplitMix64& rng) {
  Tensor t(std::move(shape));
  const double std = std::sqrt(2.0 / fan_in);
  for (float& v : t.values()) v = static_cast<float>(std * rng.normal());
  return t;
}

}  // namespace

Conv::Conv(ParamStore& ps, const std::string& name, int cin, int cout, ConvGeometry geom, SplitMix64& rng, bool bias)
    : g(geom) {
  w = ps.add(name + ".w", kaiming({cout, cin, g.kernel[0], g.kernel[1], g.kernel[2]}, cin * g.kernel_volume(), rng));
  if (bias) b = ps.add(name + ".b", Tensor({cout}, 0.0f));
}

Deconv::Deconv(ParamStore& ps, const std::string& name, int cin, int cout, ConvGeometry geom, SplitMix64& rng)
    : g(geom) {
  // Each output voxel of a stride-k deconv receives cin * (kvol / stride volume) taps.
  const int taps = std::max(1, g.kernel_volume() / (g.stride[0] * g.stride[1] * g.stride[2]));
  w = ps.add(name + ".w", kaiming({cin, cout, g.kernel[0], g.kernel[1], g.kernel[2]}, cin * taps, rng));
  b = ps.add(name + ".b", Tensor({cout}, 0.0f));
}

Norm::Norm(ParamStore& ps, const std::string& name, int channels) {
  gamma = ps.add(name + ".gamma", Tensor({channels}, 1.0f));
  beta = ps.add(name + ".beta", Tensor({channels}, 0.0f));
}

ConvNormRelu::ConvNormRelu(ParamStore& ps, const std::string& name, int cin, int cout, ConvGeometry g,
                           SplitMix64& rng)
    : conv(ps, name + ".conv", cin, cout, g, rng, false), norm(ps, name + ".norm", cout) {}

void P3DBlockConfig::validate() const {
  if (in_channels < 1 || mid_channels < 1 || out_channels < 1) throw ShapeError("P3D channels must be >= 1");
  for (int s : stride)
    if (s != 1 && s != 2) throw ShapeError("P3D stride components must be 1 or 2");
}

P3DBottleneck::P3DBottleneck(ParamStore& ps, const std::string& name, const P3DBlockConfig& cfg, SplitMix64& rng)
    : cfg_(cfg) {
  cfg.validate();
  const auto [sz, sy, sx] = cfg.stride;
  reduce_ = ConvNormRelu(ps, name + ".reduce", cfg.in_channels, cfg.mid_channels, ConvGeometry::cube(1, 1, 0), rng);
  spatial_ = ConvNormRelu(ps, name + ".spatial", cfg.mid_channels, cfg.mid_channels,
                          ConvGeometry{{1, 3, 3}, {1, sy, sx}, {0, 1, 1}}, rng);
  axial_ = ConvNormRelu(ps, name + ".axial", cfg.mid_channels, cfg.mid_channels,
                        ConvGeometry{{3, 1, 1}, {sz, 1, 1}, {1, 0, 0}}, rng);
  expand_ = Conv(ps, name + ".expand", cfg.mid_channels, cfg.out_channels, ConvGeometry::cube(1, 1, 0), rng, false);
  expand_norm_ = Norm(ps, name + ".expand_norm", cfg.out_channels);
  if (cfg.in_channels != cfg.out_channels || cfg.stride != std::array<int, 3>{1, 1, 1})
    proj_ = Conv(ps, name + ".proj", cfg.in_channels, cfg.out_channels, ConvGeometry{{1, 1, 1}, cfg.stride, {0, 0, 0}},
                 rng, false);
}

Var P3DBottleneck::operator()(const Var& x) const {
  if (x->value.channels() != cfg_.in_channels)
    throw ShapeError("P3D block expects " + std::to_string(cfg_.in_channels) + " channels, got " +
                     std::to_string(x->value.channels()));
  Var h = axial_(spatial_(reduce_(x)));
  h = expand_norm_(expand_(h));
  Var shortcut = proj_.w ? proj_(x) : x;
  return relu(add(h, shortcut));
}

}  // namespace cfun::nn
