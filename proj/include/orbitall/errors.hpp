#pragma once

#include <stdexcept>
#include <string>

namespace orbitall {

/// Base class of every error raised by the library. `kind()` names the
/// failure class so callers (notably the CLI) can map it to an exit code.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define ORBITALL_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(#Name, what) {}    \
  };

ORBITALL_DEFINE_ERROR(UnknownElement)
ORBITALL_DEFINE_ERROR(LinearDependence)
ORBITALL_DEFINE_ERROR(ScfNotConverged)
ORBITALL_DEFINE_ERROR(UnsupportedEnvironment)
ORBITALL_DEFINE_ERROR(InvariantViolation)
ORBITALL_DEFINE_ERROR(ParseError)
ORBITALL_DEFINE_ERROR(InvalidRotation)
ORBITALL_DEFINE_ERROR(SelectionRuleViolation)
ORBITALL_DEFINE_ERROR(LayoutMismatch)
ORBITALL_DEFINE_ERROR(UnknownChargeState)
ORBITALL_DEFINE_ERROR(DegenerateAttention)
ORBITALL_DEFINE_ERROR(MissingLowLevel)
ORBITALL_DEFINE_ERROR(NonFiniteGradient)
ORBITALL_DEFINE_ERROR(UnregisteredAdjoint)
ORBITALL_DEFINE_ERROR(InsufficientData)
ORBITALL_DEFINE_ERROR(ChecksumMismatch)
ORBITALL_DEFINE_ERROR(ConfigError)

#undef ORBITALL_DEFINE_ERROR

}  // namespace orbitall
