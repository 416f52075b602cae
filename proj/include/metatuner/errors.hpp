#pragma once

#include <stdexcept>
#include <string>

namespace metatuner {

// Shape disagreement between operands; messages name both shapes.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct ValueError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct LengthError : std::length_error {
  using std::length_error::length_error;
};

struct RangeError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// A loss function that was expected to be deterministic returned different values.
struct DeterminismError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite or runaway loss.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace metatuner
