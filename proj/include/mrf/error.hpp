#pragma once

#include <stdexcept>
#include <string>

namespace mrf {

enum class Err {
    // numerics
    ZeroRow,
    DimMismatch,
    EmptyInput,
    NonFinite,
    // support queue
    NotNormalized,
    QueueTooSmall,
    UnlabeledQueue,
    // nna objective
    BadTemperature,
    MaskDiagonal,
    // id heads
    BatchTooSmall,
    StaleCache,
    BadProgress,
    // encoder
    ShapeMismatch,
    DegenerateMask,
    TooShort,
    // trainer
    BadIndex,
    NonFiniteLoss,
    // probes
    TooFewNeighbors,
    MissingClass,
    ClassTooSmall,
    EmptyTest,
    // clustering
    TooFewRows,
    LengthMismatch,
    SingleCluster,
    // file formats
    BadMagic,
    Truncated,
    VersionUnsupported,
    IoFailure,
    // harness
    ConfigError,
};

const char* err_name(Err e);

struct Error : std::runtime_error {
    Err code;
    Error(Err c, const std::string& msg)
        : std::runtime_error(std::string(err_name(c)) + ": " + msg), code(c) {}
};

[[noreturn]] inline void raise(Err c, const std::string& msg) { throw Error(c, msg); }

} // namespace mrf
