#include "cfun/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "cfun/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cfun {

std::string Shape3::str() const {
  std::ostringstream os;
  os << d << "x" << h << "x" << w;
  return os.str();
}

namespace {

#if defined(__GLIBC__)
// Training allocates and frees the same large activation buffers every step.
// Keeping them on the heap instead of fresh mmap regions avoids re-faulting
// every page each step.
const bool kHeapTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

std::size_t element_count(const std::vector<int>& shape) {
  if (shape.empty() || shape.size() > 5) throw ShapeError("tensor rank must be 1..5");
  std::size_t n = 1;
  for (int s : shape) {
    if (s < 1) throw ShapeError("tensor dims must be >= 1");
    n *= static_cast<std::size_t>(s);
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int> shape, float fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(int channels, Shape3 spatial, float fill)
    : Tensor(std::vector<int>{channels, spatial.d, spatial.h, spatial.w}, fill) {}

Shape3 Tensor::spatial() const {
  if (rank() != 4) throw ShapeError("expected a (C,D,H,W) tensor, got " + shape_str());
  return {shape_[1], shape_[2], shape_[3]};
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::reshape(std::vector<int> shape) {
  if (element_count(shape) != data_.size()) throw ShapeError("reshape changes element count");
  shape_ = std::move(shape);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << ")";
  return os.str();
}

}  // namespace cfun
