#pragma once

#include <stdexcept>
#include <string>

namespace uwbcal {

/// Root of every exception thrown by the library. `kind()` is a stable,
/// machine-readable tag; `what()` carries the human-readable detail.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(kind + ": " + message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define UWBCAL_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                       \
   public:                                                          \
    explicit Name(const std::string& message) : Error(#Name, message) {} \
  }

// geometry
UWBCAL_DEFINE_ERROR(OutOfRange);
// solver
UWBCAL_DEFINE_ERROR(StructuralError);
UWBCAL_DEFINE_ERROR(NumericalFailure);
// factors
UWBCAL_DEFINE_ERROR(DegenerateGeometry);
// apc
UWBCAL_DEFINE_ERROR(InsufficientData);
UWBCAL_DEFINE_ERROR(NoOverlap);
// lcrsf
UWBCAL_DEFINE_ERROR(InsufficientInit);
UWBCAL_DEFINE_ERROR(WindowUnderflow);
// simgen
UWBCAL_DEFINE_ERROR(ConfigError);
UWBCAL_DEFINE_ERROR(LengthMismatch);
// dataio
UWBCAL_DEFINE_ERROR(ParseError);
UWBCAL_DEFINE_ERROR(DuplicateTimestamp);
UWBCAL_DEFINE_ERROR(VersionMismatch);
UWBCAL_DEFINE_ERROR(TooFewPairs);
UWBCAL_DEFINE_ERROR(IoError);

#undef UWBCAL_DEFINE_ERROR

}  // namespace uwbcal
