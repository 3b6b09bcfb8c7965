#include "als/error.hpp"

namespace als {

const char *to_string(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::ZeroNorm: return "ZeroNorm";
    case ErrorKind::EmptyPool: return "EmptyPool";
    case ErrorKind::DimMismatch: return "DimMismatch";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::ContextOverflow: return "ContextOverflow";
    case ErrorKind::IoFailure: return "IoFailure";
    case ErrorKind::CorruptFile: return "CorruptFile";
    case ErrorKind::LayerMismatch: return "LayerMismatch";
    case ErrorKind::EmptyGoodPool: return "EmptyGoodPool";
    case ErrorKind::EmptyBadPool: return "EmptyBadPool";
    case ErrorKind::EmptyCorpus: return "EmptyCorpus";
    case ErrorKind::InvalidTime: return "InvalidTime";
    }
    return "Unknown";
}

int exit_code_for(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::IoFailure:
    case ErrorKind::CorruptFile:
        return 3;
    case ErrorKind::EmptyCorpus:
    case ErrorKind::EmptyGoodPool:
    case ErrorKind::EmptyBadPool:
        return 4;
    default:
        return 2;
    }
}

} // namespace als
