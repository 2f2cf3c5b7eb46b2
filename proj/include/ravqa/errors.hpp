#pragma once

#include <stdexcept>
#include <string>

namespace ravqa {

// Every failure raised by the library derives from Error. The CLI maps the
// three coarse families (config / data / checkpoint) onto process exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// numerics
class DimensionError : public Error {
public:
    using Error::Error;
};
class EmptySequenceError : public Error {
public:
    using Error::Error;
};
class BudgetError : public Error {
public:
    using Error::Error;
};
class ContractError : public Error {
public:
    using Error::Error;
};
class DeterminismError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Data-level problems: bad records, mismatched banks, invalid labels.
class DataError : public Error {
public:
    using Error::Error;
};
class DuplicateIdError : public DataError {
public:
    explicit DuplicateIdError(const std::string& id)
        : DataError("duplicate id \"" + id + "\""), id_(id) {}
    const std::string& id() const noexcept { return id_; }

private:
    std::string id_;
};
class ZeroNormKeyError : public DataError {
public:
    explicit ZeroNormKeyError(const std::string& id)
        : DataError("zero-norm key for id \"" + id + "\""), id_(id) {}
    const std::string& id() const noexcept { return id_; }

private:
    std::string id_;
};

// Binary container problems. Each failure mode has its own class so callers
// (and tests) can tell a corrupted file from a truncated or foreign one.
class FormatError : public Error {
public:
    using Error::Error;
};
class BadMagicError : public FormatError {
public:
    using FormatError::FormatError;
};
class VersionMismatchError : public FormatError {
public:
    using FormatError::FormatError;
};
class ChecksumError : public FormatError {
public:
    using FormatError::FormatError;
};
class TruncatedFileError : public FormatError {
public:
    using FormatError::FormatError;
};

class IoError : public Error {
public:
    using Error::Error;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

}  // namespace ravqa
