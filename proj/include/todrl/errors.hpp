#ifndef TODRL_ERRORS_HPP_
#define TODRL_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace todrl {

// Base class for every error raised by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Document could not be parsed (bad JSON, missing markers, ...).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Well-formed input that violates a schema or type invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient during optimization.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace todrl

#endif  // TODRL_ERRORS_HPP_
