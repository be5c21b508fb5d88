#pragma once

#include <stdexcept>
#include <string>

namespace cxo {

// Base of every error thrown by the library. `kind()` is the short machine
// readable class printed by the CLI on failure.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "Error"; }
};

#define CXO_DEFINE_ERROR(Name)                                        \
  class Name : public Error {                                         \
   public:                                                            \
    using Error::Error;                                               \
    const char* kind() const noexcept override { return #Name; }      \
  };

CXO_DEFINE_ERROR(ShapeError)
CXO_DEFINE_ERROR(IndexError)
CXO_DEFINE_ERROR(ContractError)
CXO_DEFINE_ERROR(NumericError)
CXO_DEFINE_ERROR(IoError)
CXO_DEFINE_ERROR(FormatError)
CXO_DEFINE_ERROR(ConfigError)
CXO_DEFINE_ERROR(MissingArtifactError)
CXO_DEFINE_ERROR(DivergenceError)

#undef CXO_DEFINE_ERROR

}  // namespace cxo
