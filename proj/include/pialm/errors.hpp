#pragma once

#include <stdexcept>
#include <string>

namespace pialm {

// Shape disagreement between operands. Messages carry both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Token id or target outside the vocabulary.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Violated precondition of an operation (non-scalar backward, stream too short, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid or inconsistent configuration (bad key, cache combined with shuffling, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN or Inf produced by an operation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed checkpoint, vocab or state file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pialm
