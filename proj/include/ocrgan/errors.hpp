#pragma once

#include <stdexcept>
#include <string>

namespace ocrgan {

/// Tensor shapes that do not agree with an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Bad configuration values, unknown keys, malformed config text.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dataset layout and image decoding problems. Messages carry the offending path.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a set of scores or labels cannot support the requested statistic
/// (all-equal scores for min-max scaling, single-class input to AUC).
class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Non-finite value encountered during training or a forward pass.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::string what, long step, std::string term)
      : std::runtime_error(std::move(what)), step_(step), term_(std::move(term)) {}

  long step() const noexcept { return step_; }
  const std::string& term() const noexcept { return term_; }

 private:
  long step_;
  std::string term_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ocrgan
