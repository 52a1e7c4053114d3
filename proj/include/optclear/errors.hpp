#ifndef OPTCLEAR_ERRORS_HPP
#define OPTCLEAR_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace optclear {

/// A dispatch or allocation program has no feasible point.
class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An iterative solver stopped before reaching its tolerance.
class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent run configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace optclear

#endif  // OPTCLEAR_ERRORS_HPP
