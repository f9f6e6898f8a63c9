#pragma once

#include <stdexcept>
#include <string>

namespace gauntlet {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file (JSONL line, JSON document, CSV).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Well-formed input that violates a domain invariant (duplicate id, bad vocabulary).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Operation called outside its domain (empty corpus, bad fraction, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A character of the input cannot be covered by any vocabulary token.
class TokenizationError : public Error {
 public:
  TokenizationError(const std::string& what, std::size_t position)
      : Error(what), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

/// Auditor training produced a non-finite loss.
class TrainingDivergence : public Error {
 public:
  TrainingDivergence(const std::string& what, int epoch) : Error(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

/// Experiment configuration is malformed or names missing files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage failed; `stage()` names it.
class PipelineError : public Error {
 public:
  PipelineError(std::string stage, const std::string& what) : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace gauntlet
