#pragma once

#include <stdexcept>
#include <string>

namespace tamdp {

class LabError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration; `field()` names the offending key path.
class ConfigError : public LabError {
 public:
  ConfigError(std::string field, const std::string& what)
      : LabError(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class DimensionError : public LabError {
 public:
  using LabError::LabError;
};

class NumericError : public LabError {
 public:
  using LabError::LabError;
};

/// Raised by linear solves; carries the smallest eigenvalue of the offending matrix.
class SingularityError : public LabError {
 public:
  SingularityError(const std::string& what, double min_eigenvalue)
      : LabError(what), min_eigenvalue_(min_eigenvalue) {}
  double min_eigenvalue() const noexcept { return min_eigenvalue_; }

 private:
  double min_eigenvalue_;
};

}  // namespace tamdp
