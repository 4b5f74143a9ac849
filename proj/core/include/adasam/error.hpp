#pragma once

#include <stdexcept>
#include <string>

namespace adasam {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration, shape mismatch, or violated precondition.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Filesystem or encoding failure. The message carries the offending path.
class IoError : public Error {
public:
    IoError(const std::string& what, const std::string& path)
        : Error(what + ": " + path), path_(path) {}

    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

/// A value failed domain validation (bad score, bad box, unknown id...).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Training produced a NaN or Inf loss.
class NonFiniteLossError : public Error {
public:
    using Error::Error;
};

/// Model state contract violated (e.g. merging LoRA adapters twice).
class StateError : public Error {
public:
    using Error::Error;
};

}  // namespace adasam
