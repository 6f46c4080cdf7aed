#include "mrf/error.hpp"

namespace mrf {

const char* err_name(Err e) {
    switch (e) {
        case Err::ZeroRow: return "ZeroRow";
        case Err::DimMismatch: return "DimMismatch";
        case Err::EmptyInput: return "EmptyInput";
        case Err::NonFinite: return "NonFinite";
        case Err::NotNormalized: return "NotNormalized";
        case Err::QueueTooSmall: return "QueueTooSmall";
        case Err::UnlabeledQueue: return "UnlabeledQueue";
        case Err::BadTemperature: return "BadTemperature";
        case Err::MaskDiagonal: return "MaskDiagonal";
        case Err::BatchTooSmall: return "BatchTooSmall";
        case Err::StaleCache: return "StaleCache";
        case Err::BadProgress: return "BadProgress";
        case Err::ShapeMismatch: return "ShapeMismatch";
        case Err::DegenerateMask: return "DegenerateMask";
        case Err::TooShort: return "TooShort";
        case Err::BadIndex: return "BadIndex";
        case Err::NonFiniteLoss: return "NonFiniteLoss";
        case Err::TooFewNeighbors: return "TooFewNeighbors";
        case Err::MissingClass: return "MissingClass";
        case Err::ClassTooSmall: return "ClassTooSmall";
        case Err::EmptyTest: return "EmptyTest";
        case Err::TooFewRows: return "TooFewRows";
        case Err::LengthMismatch: return "LengthMismatch";
        case Err::SingleCluster: return "SingleCluster";
        case Err::BadMagic: return "BadMagic";
        case Err::Truncated: return "Truncated";
        case Err::VersionUnsupported: return "VersionUnsupported";
        case Err::IoFailure: return "IoFailure";
        case Err::ConfigError: return "ConfigError";
    }
    return "UnknownError";
}

} // namespace mrf
