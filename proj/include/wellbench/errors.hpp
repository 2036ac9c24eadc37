#pragma once

#include <stdexcept>
#include <string>

namespace wellbench {

// Error taxonomy maps onto CLI exit codes: validation errors (bad config,
// malformed input, schema mismatch) exit 2, runtime errors (training,
// evaluation, I/O mid-run) exit 3, provider errors (LLM transport) exit 4.

struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct RuntimeError : std::runtime_error {
    explicit RuntimeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ProviderError : std::runtime_error {
    explicit ProviderError(const std::string& msg) : std::runtime_error(msg) {}
};

// -- validation family --------------------------------------------------

struct ConfigError : ValidationError {
    explicit ConfigError(const std::string& msg) : ValidationError(msg) {}
};

struct FormatError : ValidationError {
    explicit FormatError(const std::string& msg) : ValidationError(msg) {}
};

struct SchemaError : ValidationError {
    explicit SchemaError(const std::string& msg) : ValidationError(msg) {}
};

struct ShapeError : ValidationError {
    explicit ShapeError(const std::string& msg) : ValidationError(msg) {}
};

struct SpanAlignError : ValidationError {
    explicit SpanAlignError(const std::string& msg) : ValidationError(msg) {}
};

struct ImportError : ValidationError {
    explicit ImportError(const std::string& msg) : ValidationError(msg) {}
};

// -- runtime family ------------------------------------------------------

struct DomainError : RuntimeError {
    explicit DomainError(const std::string& msg) : RuntimeError(msg) {}
};

struct TrainingError : RuntimeError {
    explicit TrainingError(const std::string& msg) : RuntimeError(msg) {}
};

struct AlignmentError : RuntimeError {
    explicit AlignmentError(const std::string& msg) : RuntimeError(msg) {}
};

struct EvaluationError : RuntimeError {
    explicit EvaluationError(const std::string& msg) : RuntimeError(msg) {}
};

// -- provider family -----------------------------------------------------

struct AuthError : ProviderError {
    explicit AuthError(const std::string& msg) : ProviderError(msg) {}
};

struct ReplayMissError : ProviderError {
    explicit ReplayMissError(const std::string& msg) : ProviderError(msg) {}
};

struct TransportError : ProviderError {
    explicit TransportError(const std::string& msg) : ProviderError(msg) {}
};

}  // namespace wellbench
