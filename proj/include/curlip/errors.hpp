#pragma once

#include <stdexcept>
#include <string>

namespace curlip {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define CURLIP_DEFINE_ERROR(NAME) \
  struct NAME : Error {           \
    using Error::Error;           \
  };

CURLIP_DEFINE_ERROR(MalformedUrl)
CURLIP_DEFINE_ERROR(IoError)
CURLIP_DEFINE_ERROR(SchemaError)
CURLIP_DEFINE_ERROR(LabelError)
CURLIP_DEFINE_ERROR(BadRatios)
CURLIP_DEFINE_ERROR(VocabTooSmall)
CURLIP_DEFINE_ERROR(NoMaskablePositions)
CURLIP_DEFINE_ERROR(BadIp)
CURLIP_DEFINE_ERROR(EmptyInput)
CURLIP_DEFINE_ERROR(NoDomain)
CURLIP_DEFINE_ERROR(ShapeMismatch)
CURLIP_DEFINE_ERROR(DegenerateVector)
CURLIP_DEFINE_ERROR(EmptyMaskSet)
CURLIP_DEFINE_ERROR(LengthMismatch)
CURLIP_DEFINE_ERROR(DegenerateLabels)
CURLIP_DEFINE_ERROR(ConfigError)

#undef CURLIP_DEFINE_ERROR

}  // namespace curlip
