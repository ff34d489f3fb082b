#pragma once

// Exception taxonomy. Every failure the library can signal derives from
// ftlab::Error so callers can map categories to process exit codes without
// string-matching messages.

#include <stdexcept>
#include <string>

namespace ftlab {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid or contradictory configuration: unknown keys, out-of-range values,
// zero sampling budgets, mismatched experiment configs.
struct ConfigError : Error {
  using Error::Error;
};

// Problems with input data files (corpora, checkpoints, metrics).
struct DataError : Error {
  using Error::Error;
};

// Malformed record; `line` is 1-based within the offending file.
struct ParseError : DataError {
  ParseError(const std::string& file, long line, const std::string& what)
      : DataError(file + ":" + std::to_string(line) + ": " + what), line(line) {}
  long line = 0;
};

// Symbol not covered by the active vocabulary; message names the symbol.
struct VocabularyError : DataError {
  using DataError::DataError;
};

struct CheckpointError : DataError {
  using DataError::DataError;
};

// An operation was called outside its documented precondition
// (zero-reward item in a positives-only loss, empty batch, ...).
struct ContractError : Error {
  using Error::Error;
};

// Trajectory does not fit the policy's maximum context length.
struct LengthError : ContractError {
  using ContractError::ContractError;
};

// Response space too large to enumerate under the configured cap.
struct EnumerationCapError : ContractError {
  using ContractError::ContractError;
};

// Argument outside a mathematical domain (e.g. log of a non-positive value).
struct DomainError : ContractError {
  using ContractError::ContractError;
};

// A closed-form identity failed to hold within tolerance; carries the residual.
struct IdentityViolation : Error {
  IdentityViolation(const std::string& what, double residual)
      : Error(what), residual(residual) {}
  double residual = 0.0;
};

}  // namespace ftlab
