#pragma once

#include <stdexcept>
#include <string>

namespace hma {

/// Base of every error thrown by the library. `kind()` is a stable,
/// machine-parseable tag used by the CLI when reporting failures.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& what) : Error("shape", what) {}
};

struct PartitionError : Error {
    explicit PartitionError(const std::string& what) : Error("partition", what) {}
};

struct LabelError : Error {
    explicit LabelError(const std::string& what) : Error("label", what) {}
};

struct FormatError : Error {
    FormatError(const std::string& what, std::size_t offset)
        : Error("format", what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

struct UsageError : Error {
    explicit UsageError(const std::string& what) : Error("usage", what) {}
};

struct EvaluationError : Error {
    explicit EvaluationError(const std::string& what) : Error("evaluation", what) {}
};

struct DivergenceError : Error {
    explicit DivergenceError(const std::string& what) : Error("divergence", what) {}
};

struct ResourceError : Error {
    explicit ResourceError(const std::string& what) : Error("resource", what) {}
};

}  // namespace hma
