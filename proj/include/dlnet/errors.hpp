#pragma once

#include <stdexcept>
#include <string>

namespace dlnet {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible matrix shapes or layer dimensions.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Input violates a documented precondition (asymmetric input to a
// symmetric routine, negative eigenvalues beyond noise, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// XX^T is not of full rank.
class HypothesisError : public Error {
 public:
  using Error::Error;
};

// The initialization is too unbalanced for the requested delta, or a
// uniform family is infeasible.
class CertificationError : public Error {
 public:
  using Error::Error;
};

// Invalid numeric parameters (dims schedule, configs).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Balanced construction impossible for the requested dims.
class ConstructionError : public Error {
 public:
  using Error::Error;
};

// Non-finite state during ODE integration.
class BlowUpError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what)
      : Error(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace dlnet
