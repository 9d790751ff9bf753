#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dualstream {

enum class ErrorCode {
    startup,
    kernel_dead,
    busy,
    not_found,
    invalid_name,
    collision,
    not_callable,
    unsupported_version,
    corrupt_snapshot,
    metadata_missing,
    duplicate_descriptor,
    template_error,
    ordering_error,
    script_exhausted,
    request_failed,
    contract,
    schema,
    io,
    already_bound,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Base for every error raised by the library. The code is stable and is
/// what callers (and the CLI exit-code mapping) dispatch on.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

class NotFound : public Error {
public:
    explicit NotFound(std::string name)
        : Error(ErrorCode::not_found, "name not found: " + name), name_(std::move(name)) {}

    [[nodiscard]] const std::string& name() const noexcept { return name_; }

private:
    std::string name_;
};

}  // namespace dualstream
