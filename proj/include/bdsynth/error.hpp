#pragma once

#include <stdexcept>
#include <string>

namespace bdsynth {

/// Root of every exception thrown by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input text (JSON, JSONL, PPM). Carries the 1-based line when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// A record or value violates a documented invariant or precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration file or CLI arguments (maps to exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A backend (VQA, editor, generator, scorer) failed on one item.
class BackendError : public Error {
 public:
  using Error::Error;
};

/// Training diverged or could not proceed.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Resume found an artifact whose hash no longer matches its stage record.
class HashMismatchError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage failed (maps to exit code 3).
class StageError : public Error {
 public:
  using Error::Error;
};

}  // namespace bdsynth
