#pragma once

#include <stdexcept>
#include <string>

namespace softgrpo {

// Shape or extent mismatch between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Input outside the mathematical domain of an operation (log of x <= 0, ...).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Violated precondition on the caller side.
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct CapacityError : std::length_error {
  using std::length_error::length_error;
};

// A non-finite intermediate showed up during training math.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Corrupt or mismatched checkpoint.
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace softgrpo
