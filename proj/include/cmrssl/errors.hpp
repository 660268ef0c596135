#pragma once

#include <stdexcept>
#include <string>

namespace cmrssl {

/// Base for every error raised by the library. `kind()` is the stable name
/// used in logs and by the CLI when mapping errors to exit codes.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define CMRSSL_DEFINE_ERROR(Name)                                              \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& what) : Error(#Name, what) {}         \
    }

// geometry
CMRSSL_DEFINE_ERROR(ParallelPlanes);
CMRSSL_DEFINE_ERROR(ParallelLines);
CMRSSL_DEFINE_ERROR(OffPlanePoint);
CMRSSL_DEFINE_ERROR(AmbiguousOrientation);
CMRSSL_DEFINE_ERROR(InvalidGeometry);

// data
CMRSSL_DEFINE_ERROR(DegenerateSpec);
CMRSSL_DEFINE_ERROR(FormatError);
CMRSSL_DEFINE_ERROR(InsufficientSubjects);

// network / training
CMRSSL_DEFINE_ERROR(BadShape);
CMRSSL_DEFINE_ERROR(BadBudget);
CMRSSL_DEFINE_ERROR(EmptyDataset);
CMRSSL_DEFINE_ERROR(MissingCheckpoint);
CMRSSL_DEFINE_ERROR(BadConfig);
CMRSSL_DEFINE_ERROR(TrainingDiverged);

// metrics
CMRSSL_DEFINE_ERROR(ShapeMismatch);
CMRSSL_DEFINE_ERROR(EmptyMask);

#undef CMRSSL_DEFINE_ERROR

} // namespace cmrssl
