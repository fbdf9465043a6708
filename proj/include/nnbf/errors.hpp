#pragma once

#include <stdexcept>
#include <string>

namespace nnbf {

// Shape disagreement between tensor operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid configuration value (divisibility, ranges, enum membership).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// API misuse: stale tape, non-scalar loss, off-schedule sync.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Channel matrix is rank deficient / ill conditioned at a resource element.
struct SingularChannelError : std::runtime_error {
  SingularChannelError(const std::string& msg, int l, int k)
      : std::runtime_error(msg), symbol(l), subcarrier(k) {}
  int symbol;
  int subcarrier;
};

// SINR denominator is exactly zero (zero combiner row with zero noise).
struct UndefinedSinrError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite gradient or loss; carries the offending parameter name.
struct TrainingDivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bit-stream length does not match what the codec or mapper expects.
struct FramingError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace nnbf
