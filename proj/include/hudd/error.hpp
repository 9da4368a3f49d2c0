#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hudd {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input whose shape or dimensions do not match what the operation expects.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Argument outside its documented domain (empty set, out-of-range k, ...).
class InvalidArgument : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

/// Malformed binary or text artifact. Carries the byte (or line) offset
/// at which parsing stopped.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// Artifact written by an incompatible format version or with a foreign magic.
class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

/// Failure inside a named pipeline stage; what() is prefixed with "[stage]".
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what) : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

}  // namespace hudd
