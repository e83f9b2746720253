#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ccnf {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller passed something that violates a precondition (shape, range, finiteness).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

// Operation called in the wrong lifecycle state, e.g. backward() on a tape still recording.
class StateError : public Error {
 public:
  using Error::Error;
};

// Requested path is not supported for this configuration (adaptive solver on a
// recorded integration, exact trace above the dimension cap, ...).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

// Adaptive integration exceeded its step budget.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// A non-finite value appeared in the numerical state.
class InstabilityError : public Error {
 public:
  using Error::Error;
};

// An attribute axis has no spread (min == max), so it cannot be normalized.
class DegenerateDimension : public InvalidInput {
 public:
  DegenerateDimension(std::size_t axis, const std::string& what)
      : InvalidInput(what), axis_(axis) {}
  std::size_t axis() const noexcept { return axis_; }

 private:
  std::size_t axis_;
};

// Non-fatal warnings (attribute clamping, degenerate probe axes). The CLI
// forwards them to stderr.
struct Diagnostics {
  std::vector<std::string> warnings;
  void warn(std::string message) { warnings.push_back(std::move(message)); }
};

}  // namespace ccnf
