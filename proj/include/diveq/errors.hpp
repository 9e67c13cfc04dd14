// SPDX-License-Identifier: Apache-2.0
//
// Error taxonomy shared across the library. The CLI maps these onto
// process exit codes (config 2, runtime abort 3, I/O 4).

#pragma once

#include <stdexcept>
#include <string>

namespace diveq {

// Invalid configuration or schema violation; message carries the field path.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Filesystem / serialization failure (missing file, malformed header, ...).
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values or numerically unusable state produced by an operation.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training cannot continue (divergence, total codebook collapse).
struct runtime_abort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes violate a primitive's contract.
struct shape_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

}  // namespace diveq
