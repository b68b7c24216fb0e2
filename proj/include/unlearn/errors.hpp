#pragma once

#include <stdexcept>
#include <string>

namespace unlearn {

// Error taxonomy shared by the library and the CLI. The CLI maps these to
// process exit codes: ConfigError -> 2, TrainingError -> 3,
// IncompatibleError -> 4, everything else -> 1.

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct VocabError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CoverageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UndefinedBaselineError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raised when a training loop produces a non-finite loss; carries the step
// at which the divergence was detected.
struct TrainingError : std::runtime_error {
    TrainingError(const std::string& what, long step_index)
        : std::runtime_error(what + " (step " + std::to_string(step_index) + ")"),
          step(step_index) {}
    long step;
};

// Checkpoint/dataset incompatibility (fingerprint or shape mismatch).
struct IncompatibleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace unlearn
