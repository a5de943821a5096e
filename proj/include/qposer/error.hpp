// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace qposer {

/// Broad failure classes. The CLI maps them onto exit codes and the
/// service onto HTTP statuses, so every thrown error carries one.
enum class ErrorKind {
    invalid_argument,  // malformed input or violated precondition
    format,            // unreadable / corrupt file or payload
    numeric,           // non-finite values, divergence
    not_found,         // unknown part, reference, file
    mismatch,          // fingerprint or skeleton mismatch between artifacts
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline const char* to_string(ErrorKind k) noexcept {
    switch (k) {
        case ErrorKind::invalid_argument: return "invalid_argument";
        case ErrorKind::format: return "format";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::not_found: return "not_found";
        case ErrorKind::mismatch: return "mismatch";
    }
    return "unknown";
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace qposer
