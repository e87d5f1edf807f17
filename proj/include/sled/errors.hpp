#pragma once

#include <stdexcept>
#include <string>

namespace sled {

// Error taxonomy. The CLI maps these onto exit codes: config/parameter
// problems -> 1, data/format problems -> 2, verification failures -> 3.

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParamError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EvalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ManifestError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CompatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace sled
