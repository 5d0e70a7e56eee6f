#pragma once

#include <stdexcept>
#include <string>

namespace fme {

// Error taxonomy shared by every module. All failures surface as exceptions
// derived from Error; the CLI maps them onto its exit-code contract.
class Error : public std::runtime_error {
  public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor extents do not line up for the requested operation.
class ShapeError : public Error {
  public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration value (hyperparameters, fractions, groups, ...).
class ConfigError : public Error {
  public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// A caller violated an operation's precondition.
class ContractError : public Error {
  public:
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Non-finite value produced, or training diverged.
class NumericError : public Error {
  public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

class DatasetError : public Error {
  public:
    explicit DatasetError(const std::string& msg) : Error(msg) {}
};

class CheckpointError : public Error {
  public:
    explicit CheckpointError(const std::string& msg) : Error(msg) {}
};

class CurveError : public Error {
  public:
    explicit CurveError(const std::string& msg) : Error(msg) {}
};

}  // namespace fme
