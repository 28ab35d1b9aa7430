#pragma once

#include <stdexcept>
#include <string>

namespace panvae {

// Error categories map one-to-one onto the CLI exit codes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingDivergence : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GeometryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Gram factorization failure after jitter escalation, coincident
// prototypes in the DB index, and similar numerical dead ends.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace panvae
