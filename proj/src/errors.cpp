#include "hnc/errors.hpp"

namespace hnc {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::DimensionTooSmall: return "dimension-too-small";
        case ErrorKind::InvalidClassCount: return "invalid-class-count";
        case ErrorKind::NonPositiveCount: return "nonpositive-count";
        case ErrorKind::Capacity: return "capacity";
        case ErrorKind::WrongFrameKind: return "wrong-frame-kind";
        case ErrorKind::Degenerate: return "degenerate-sample";
        case ErrorKind::Parse: return "parse";
        case ErrorKind::OrphanNode: return "orphan-node";
        case ErrorKind::DuplicateId: return "duplicate-id";
        case ErrorKind::EmptyLevel: return "empty-level";
        case ErrorKind::UnknownParent: return "unknown-parent";
        case ErrorKind::SingleColumnFrame: return "single-column-frame";
        case ErrorKind::ZeroVector: return "zero-vector";
        case ErrorKind::MissingAncestor: return "missing-ancestor";
        case ErrorKind::InfeasibleShape: return "infeasible-shape";
        case ErrorKind::Size: return "size";
        case ErrorKind::BoxRange: return "box-range";
        case ErrorKind::MismatchedScenes: return "mismatched-scenes";
        case ErrorKind::InvalidRange: return "invalid-range";
        case ErrorKind::Overlap: return "overlap";
        case ErrorKind::EmptyPhase: return "empty-phase";
        case ErrorKind::DimensionMismatch: return "dimension-mismatch";
        case ErrorKind::MissingSnapshot: return "missing-snapshot";
        case ErrorKind::DegenerateClass: return "degenerate-class";
        case ErrorKind::InsufficientEpochs: return "insufficient-epochs";
        case ErrorKind::ResumeConflict: return "resume-conflict";
        case ErrorKind::Io: return "io";
        case ErrorKind::Validation: return "validation";
    }
    return "unknown";
}

}  // namespace hnc
