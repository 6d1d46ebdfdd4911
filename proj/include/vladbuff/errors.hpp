#pragma once

#include <stdexcept>
#include <string>

namespace vladbuff {

/// Base of every error raised by the library. `kind()` names the category so
/// callers (the CLI in particular) can map errors to exit codes.
class Error : public std::runtime_error {
 public:
  Error(const char* kind, const std::string& what)
      : std::runtime_error(std::string(kind) + ": " + what), kind_(kind) {}
  const char* kind() const noexcept { return kind_; }

 private:
  const char* kind_;
};

#define VLADBUFF_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(#Name, what) {}    \
  };

VLADBUFF_DEFINE_ERROR(FormatError)
VLADBUFF_DEFINE_ERROR(TruncatedError)
VLADBUFF_DEFINE_ERROR(DataError)
VLADBUFF_DEFINE_ERROR(IoError)
VLADBUFF_DEFINE_ERROR(ShapeError)
VLADBUFF_DEFINE_ERROR(ConfigError)
VLADBUFF_DEFINE_ERROR(DegenerateError)
VLADBUFF_DEFINE_ERROR(ContractError)
VLADBUFF_DEFINE_ERROR(NumericalError)
VLADBUFF_DEFINE_ERROR(BenchError)

#undef VLADBUFF_DEFINE_ERROR

}  // namespace vladbuff
