#pragma once

#include <stdexcept>
#include <string>

namespace genemoe {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Argument outside the mathematical domain of an operation (log of a
/// non-positive value, negative standard deviation, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Softmax over a slice with no finite entry.
class DegenerateSliceError : public DomainError {
public:
    using DomainError::DomainError;
};

/// Precondition of an operation violated by the caller.
class ContractError : public Error {
public:
    using Error::Error;
};

/// A statistic that has no defined value for the given input.
class UndefinedStatisticError : public Error {
public:
    using Error::Error;
};

/// Invalid model / training / data configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input file. Message carries the offending line when known.
class ParseError : public Error {
public:
    using Error::Error;
};

/// Data that cannot go through the preprocessing pipeline.
class DataError : public Error {
public:
    using Error::Error;
};

/// A class too small to appear in both halves of a split.
class StratificationError : public DataError {
public:
    using DataError::DataError;
};

/// NaN or Inf appeared in a training loss.
class NumericError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Checkpoint load failures, kept distinct so callers can react differently.
class CheckpointFormatError : public IoError {
public:
    using IoError::IoError;
};

class CheckpointTruncatedError : public IoError {
public:
    using IoError::IoError;
};

class CheckpointShapeError : public IoError {
public:
    using IoError::IoError;
};

} // namespace genemoe
