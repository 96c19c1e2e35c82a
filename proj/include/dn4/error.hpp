#pragma once

#include <stdexcept>
#include <string>

namespace dn4 {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Violated calling contract (non-scalar loss, label out of range, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Invalid or missing configuration (k too large, missing checkpoint, unknown key).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed file payload.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Dataset manifest problems; the message names the offending entry.
class IngestionError : public Error {
public:
    using Error::Error;
};

/// Not enough classes or images to draw an episode.
class SamplingError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf encountered during training or optimization.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace dn4
