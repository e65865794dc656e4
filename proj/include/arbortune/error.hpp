#pragma once

#include <stdexcept>
#include <string>

namespace arbortune {

// Error classes map onto CLI exit codes: config=2, data=3, runtime=4.
enum class ErrorClass { config = 2, data = 3, runtime = 4 };

class Error : public std::runtime_error {
  public:
    Error(ErrorClass cls, const std::string& what) : std::runtime_error(what), class_(cls) {}

    ErrorClass error_class() const noexcept { return class_; }

  private:
    ErrorClass class_;
};

/// Malformed or inconsistent configuration: schema files, flags, hyperparameters.
class ConfigError : public Error {
  public:
    explicit ConfigError(const std::string& what) : Error(ErrorClass::config, what) {}
};

/// Input data that violates a contract: dimension mismatch, out-of-range values.
class DataError : public Error {
  public:
    explicit DataError(const std::string& what) : Error(ErrorClass::data, what) {}
};

/// Failures while computing: NaN losses, singular solves, environment faults.
class RuntimeFault : public Error {
  public:
    explicit RuntimeFault(const std::string& what) : Error(ErrorClass::runtime, what) {}
};

} // namespace arbortune
