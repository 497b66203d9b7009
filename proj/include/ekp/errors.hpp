#pragma once
#include <stdexcept>
#include <string>

namespace ekp {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define EKP_DEFINE_ERROR(Name) \
  class Name : public Error {  \
   public:                     \
    using Error::Error;        \
  };

EKP_DEFINE_ERROR(ShapeError)
EKP_DEFINE_ERROR(UnsupportedArchitectureError)
EKP_DEFINE_ERROR(EmptyLayerError)
EKP_DEFINE_ERROR(InvalidCandidateError)
EKP_DEFINE_ERROR(StructuralError)
EKP_DEFINE_ERROR(InsufficientDataError)
EKP_DEFINE_ERROR(NumericFailureError)
EKP_DEFINE_ERROR(CoverageError)
EKP_DEFINE_ERROR(SearchStuckError)
EKP_DEFINE_ERROR(InfeasibleTargetError)
EKP_DEFINE_ERROR(NoTeachersError)
EKP_DEFINE_ERROR(UndefinedCorrelationError)
EKP_DEFINE_ERROR(DivergenceError)
EKP_DEFINE_ERROR(ConfigError)
EKP_DEFINE_ERROR(IoError)

#undef EKP_DEFINE_ERROR

}  // namespace ekp
