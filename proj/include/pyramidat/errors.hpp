#pragma once

#include <stdexcept>
#include <string>

namespace pyramidat {

/// Bad user-facing configuration: invalid specs, shapes, schedule parameters.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Internally inconsistent structures, e.g. a pyramid whose levels do not
/// match the spec it is used with.
struct StructureError : std::runtime_error {
    explicit StructureError(const std::string& what) : std::runtime_error(what) {}
};

/// Dataset ingestion failures; the message names the offending file.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite losses or gradients during training or attack generation.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pyramidat
