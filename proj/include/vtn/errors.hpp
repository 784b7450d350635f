#pragma once

#include <stdexcept>
#include <string>

namespace vtn {

// Input that violates a documented precondition (coordinates out of range,
// bad config values, mismatched shapes supplied by the caller).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Data whose structure cannot be interpreted (malformed token vectors,
// corrupt checkpoints, unparseable files).
class StructuralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace vtn
