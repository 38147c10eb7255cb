#pragma once

#include <stdexcept>
#include <string>

namespace matir {

/// Base class for all errors thrown by the library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape or dimension mismatch between operands.
struct DimensionError : Error {
    using Error::Error;
};

/// A call violated an operation's precondition.
struct ContractError : Error {
    using Error::Error;
};

/// Invalid model configuration; the message names the offending field.
struct ConfigError : Error {
    using Error::Error;
};

/// Malformed or incompatible file contents (checkpoints, images, configs).
struct FormatError : Error {
    using Error::Error;
};

/// Filesystem-level failure (missing file, short read, write error).
struct IoError : Error {
    using Error::Error;
};

/// Training aborted (empty dataset, non-finite loss).
struct TrainError : Error {
    using Error::Error;
};

}  // namespace matir
