#pragma once

#include <stdexcept>
#include <string>

namespace protofuse {

// Process exit codes used by the CLI. Each exception type maps onto one.
enum class ExitCode : int {
  kOk = 0,
  kArgument = 2,
  kData = 3,
  kConvergence = 4,
  kVerification = 5,
};

class Error : public std::runtime_error {
 public:
  Error(const std::string& what, ExitCode code)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& what)
      : Error(what, ExitCode::kArgument) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(what, ExitCode::kData) {}
};

// Malformed input file. line is 1-based; 0 when not line-oriented.
class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : DataError(line ? what + " (line " + std::to_string(line) + ")" : what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// A statistic that has no value for the given input, e.g. a C-index with no
// comparable pairs.
class UndefinedMetricError : public DataError {
 public:
  explicit UndefinedMetricError(const std::string& what) : DataError(what) {}
};

class NumericalError : public DataError {
 public:
  explicit NumericalError(const std::string& what) : DataError(what) {}
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : Error(what + " (residual " + std::to_string(residual) + ")",
              ExitCode::kConvergence),
        residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

}  // namespace protofuse
