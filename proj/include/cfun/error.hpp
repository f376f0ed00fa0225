#pragma once

#include <stdexcept>
#include <string>

namespace cfun {

// Violated precondition on shapes, channel counts or argument ranges.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed file contents (bad magic, truncated payload, non-finite data).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A non-finite loss during training. `step` is the offending optimizer step.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int step, const std::string& what)
      : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
  [[nodiscard]] int step() const { return step_; }

 private:
  int step_;
};

}  // namespace cfun
