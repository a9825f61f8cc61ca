#pragma once

#include <stdexcept>
#include <string>

namespace sal3sd {

/// Invalid hyperparameters, arch descriptors or incompatible sizes.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// Raised when a loss term becomes non-finite. `term()` names the offender.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::string term, const std::string& what)
      : std::runtime_error(what), term_(std::move(term)) {}
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

/// Image logits too close to zero for cosine-based patch mining.
class DegenerateLogitsError : public std::runtime_error {
 public:
  explicit DegenerateLogitsError(const std::string& what) : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace sal3sd
