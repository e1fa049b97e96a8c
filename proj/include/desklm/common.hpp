#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace desklm {

// Bad flags, bad config values, missing required paths. CLI maps this to the
// usage exit code.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or insufficient input data.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Filesystem / stream failures.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Half-up rounding to a fixed number of decimals, for reported scores.
inline double round_half_up(double x, int decimals) {
    double scale = std::pow(10.0, decimals);
    if (x >= 0.0) {
        return std::floor(x * scale + 0.5) / scale;
    }
    return -std::floor(-x * scale + 0.5) / scale;
}

// Strict UTF-8 validation: rejects overlong forms, surrogates, values past
// U+10FFFF and truncated sequences.
bool is_valid_utf8(const std::string& bytes);

// Formats a double with enough digits to round-trip, stable across runs on
// one machine. Used wherever output files must be byte-reproducible.
std::string format_double(double v);

std::string format_fixed(double v, int decimals);

}  // namespace desklm
