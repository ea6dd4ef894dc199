#pragma once

#include <stdexcept>
#include <string>

namespace roadq {

// Malformed or inconsistent input: topology/policy files, CLI values, bad
// solver configuration.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A queue is at or beyond capacity (arrival rate >= service rate), so
// steady-state quantities are undefined at the requested operating point.
class InstabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A structurally impossible request: no path between a flow's endpoints,
// a numerical horizon too short to hold the requested distribution, a
// search space outside supported dimensionality, and similar.
class InfeasibilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace roadq
