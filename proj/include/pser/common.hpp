#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace pser {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Bad user-supplied configuration (spec file, flag combination, bad ranges).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed serialized data. `line` is 1-based when the source is line-oriented.
struct ParseError : std::runtime_error {
  int line = 0;
  explicit ParseError(const std::string& msg, int line_no = 0)
      : std::runtime_error(line_no > 0 ? msg + " (line " + std::to_string(line_no) + ")" : msg),
        line(line_no) {}
};

// Structurally valid input that violates a documented contract.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor/sequence with an incompatible shape or length.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Reference to an unknown id (speaker, utterance, tensor name).
struct LookupError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training aborted (divergence, non-finite loss). Not a user error.
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace pser
