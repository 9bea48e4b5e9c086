#pragma once

#include <stdexcept>
#include <string>

namespace tweezersim {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BoundsError : public Error {
 public:
  using Error::Error;
};

// Text-format errors carry a 1-based line/column of the offending character.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line, int col)
      : Error(what + " (line " + std::to_string(line) + ", column " +
              std::to_string(col) + ")"),
        line_(line),
        col_(col) {}
  int line() const { return line_; }
  int column() const { return col_; }

 private:
  int line_;
  int col_;
};

class DegeneratePairError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class StepSizeError : public Error {
 public:
  using Error::Error;
};

class ExecutionIntegrityError : public Error {
 public:
  using Error::Error;
};

class FitError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace tweezersim
