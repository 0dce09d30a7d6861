#pragma once

#include <stdexcept>
#include <string>

namespace rapscan {

// Base for every error raised by the library. The CLI maps subclasses onto
// process exit codes (see exit_code_for).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke a documented precondition.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// Corpus or zoo generation could not satisfy its own spec.
class GenerationError : public Error {
 public:
  using Error::Error;
};

// Trigger optimization produced a non-finite embedding.
class OptimizationError : public Error {
 public:
  OptimizationError(const std::string& what, int epoch)
      : Error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class TransportError : public Error {
 public:
  TransportError(const std::string& what, std::string request_id = {})
      : Error(what), request_id_(std::move(request_id)) {}
  const std::string& request_id() const { return request_id_; }

 private:
  std::string request_id_;
};

class VersionError : public TransportError {
 public:
  using TransportError::TransportError;
};

class NormalizationError : public TransportError {
 public:
  using TransportError::TransportError;
};

// A trained zoo model failed its clean-accuracy or attack-success gate.
class QualityGateError : public Error {
 public:
  using Error::Error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractViolation(what);
}

}  // namespace rapscan
