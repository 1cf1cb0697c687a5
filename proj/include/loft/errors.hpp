#pragma once

#include <stdexcept>
#include <string>

namespace loft {

// Base for all library errors. CLI maps subclasses to exit codes.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Inconsistent tensor/layer dimensions. Message names the offending layer.
struct ShapeError : Error {
    using Error::Error;
};

// Bad magic, truncation, or inconsistent fields in a binary artifact.
struct FormatError : Error {
    using Error::Error;
};

// Invalid configuration values or missing required settings.
struct ConfigError : Error {
    using Error::Error;
};

// A required input artifact does not exist on disk. Exit code 3 in the CLI.
struct ArtifactNotFound : Error {
    using Error::Error;
};

// Non-finite loss or gradient during training.
struct DivergenceError : Error {
    using Error::Error;
};

}  // namespace loft
