#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace eraselora {

enum class ErrorCode {
    invalid_input,      // shape mismatch, malformed file, bad config value
    client_transport,   // external client unreachable or failed; retryable
    client_parse,       // external client answered with something we cannot use
    degenerate_scene,   // label map lacks a region a loss needs
    numerical_abort,    // non-finite loss during adaptation
    already_merged,
    not_found,
    conflict,
};

inline std::string_view to_string(ErrorCode code)
{
    switch (code) {
    case ErrorCode::invalid_input: return "invalid_input";
    case ErrorCode::client_transport: return "client_transport";
    case ErrorCode::client_parse: return "client_parse";
    case ErrorCode::degenerate_scene: return "degenerate_scene";
    case ErrorCode::numerical_abort: return "numerical_abort";
    case ErrorCode::already_merged: return "already_merged";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::conflict: return "conflict";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }
    bool retryable() const noexcept { return code_ == ErrorCode::client_transport; }

private:
    ErrorCode code_;
};

/// Parse failure from an external client; keeps the raw text for auditing.
class ParseError : public Error {
public:
    ParseError(const std::string& message, std::string raw)
        : Error(ErrorCode::client_parse, message), raw_(std::move(raw)) {}

    const std::string& raw() const noexcept { return raw_; }

private:
    std::string raw_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message)
{
    throw Error(code, message);
}

inline void require(bool condition, const std::string& message)
{
    if (!condition)
        throw Error(ErrorCode::invalid_input, message);
}

/// Process exit codes used by the command line tool.
inline int exit_code_for(ErrorCode code)
{
    switch (code) {
    case ErrorCode::client_transport:
    case ErrorCode::client_parse:
        return 2;
    case ErrorCode::numerical_abort:
        return 4;
    default:
        return 3;
    }
}

} // namespace eraselora
