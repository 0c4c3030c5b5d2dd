#pragma once

#include <stdexcept>
#include <string>

namespace m2net {

// Shape or size disagreement between operands.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input data (unsupported PNG layout, bad manifest line, ...).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem-level failure: missing file, unreadable, write error.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint problems: bad magic, version mismatch, missing/mishaped record.
struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace m2net
