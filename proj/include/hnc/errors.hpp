#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hnc {

enum class ErrorKind {
    DimensionTooSmall,
    InvalidClassCount,
    NonPositiveCount,
    Capacity,
    WrongFrameKind,
    Degenerate,
    Parse,
    OrphanNode,
    DuplicateId,
    EmptyLevel,
    UnknownParent,
    SingleColumnFrame,
    ZeroVector,
    MissingAncestor,
    InfeasibleShape,
    Size,
    BoxRange,
    MismatchedScenes,
    InvalidRange,
    Overlap,
    EmptyPhase,
    DimensionMismatch,
    MissingSnapshot,
    DegenerateClass,
    InsufficientEpochs,
    ResumeConflict,
    Io,
    Validation,
};

std::string_view to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

}  // namespace hnc
