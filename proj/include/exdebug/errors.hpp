#pragma once

#include <stdexcept>
#include <string>

namespace exdebug {

// Input could not be read or tokenized.
class IngestionError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Input parsed but violates a data invariant (label range, duplicate ids, ...).
class ValidationError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Model archive is malformed or truncated.
class FormatError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Two pieces of state that must agree do not (targets vs. predictions, positions vs. length).
class ConsistencyError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace exdebug
