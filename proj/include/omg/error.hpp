#pragma once

#include <stdexcept>
#include <string>

namespace omg {

// Two buckets, matching the CLI exit codes: bad inputs/config -> 1,
// runtime failures -> 2.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define OMG_ERROR(Name, Base)                     \
  struct Name : Base {                            \
    explicit Name(const std::string& msg)         \
        : Base(std::string(#Name) + ": " + msg) {} \
  }

OMG_ERROR(AllMissing, ValidationError);
OMG_ERROR(RateOutOfRange, ValidationError);
OMG_ERROR(EmptyDataset, ValidationError);
OMG_ERROR(SchemaViolation, ValidationError);
OMG_ERROR(ShapeMismatch, ValidationError);
OMG_ERROR(NoValidPlan, ValidationError);
OMG_ERROR(EmptyKB, ValidationError);
OMG_ERROR(KTooLarge, ValidationError);
OMG_ERROR(TooShort, ValidationError);
OMG_ERROR(IncompleteRecord, ValidationError);
OMG_ERROR(EmptyInput, ValidationError);
OMG_ERROR(AllExcluded, ValidationError);
OMG_ERROR(UnknownAblation, ValidationError);
OMG_ERROR(ConfigError, ValidationError);
OMG_ERROR(VersionMismatch, ValidationError);

OMG_ERROR(ZeroVector, RuntimeFailure);
OMG_ERROR(ZeroQuery, RuntimeFailure);
OMG_ERROR(BadStep, RuntimeFailure);
OMG_ERROR(DegenerateAlpha, RuntimeFailure);
OMG_ERROR(NonFiniteLoss, RuntimeFailure);
OMG_ERROR(CorruptCheckpoint, RuntimeFailure);

#undef OMG_ERROR

}  // namespace omg
