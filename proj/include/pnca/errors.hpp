#pragma once

#include <stdexcept>
#include <string>

namespace pnca {

// Error taxonomy. Every failure mode surfaced by the library maps to one of
// these; the CLI translates ConfigError to exit code 2 and OptimError /
// training aborts to exit code 3.

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

// Violated call contract (bad label, non-scalar loss, head-kind mismatch, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// Input is numerically degenerate (zero-norm vector where a direction is needed).
struct DegenerateInputError : std::runtime_error {
    explicit DegenerateInputError(const std::string& what) : std::runtime_error(what) {}
};

// Task itself is degenerate (fewer than two classes).
struct DegenerateTaskError : std::runtime_error {
    explicit DegenerateTaskError(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

struct IngestError : std::runtime_error {
    explicit IngestError(const std::string& what) : std::runtime_error(what) {}
};

struct SamplingError : std::runtime_error {
    explicit SamplingError(const std::string& what) : std::runtime_error(what) {}
};

struct SplitError : std::runtime_error {
    explicit SplitError(const std::string& what) : std::runtime_error(what) {}
};

struct OptimError : std::runtime_error {
    explicit OptimError(const std::string& what) : std::runtime_error(what) {}
};

struct ReportError : std::runtime_error {
    explicit ReportError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pnca
