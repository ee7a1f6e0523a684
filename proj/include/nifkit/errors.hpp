#pragma once

#include <stdexcept>
#include <string>

namespace nifkit {

enum class ErrorKind {
    InvalidInput,
    Numeric,
    Divergence,
    Parse,
    DegenerateColumn,
    DegenerateMode,
    Unsupported,
    Conditioning,
    Io,
};

inline const char* to_string(ErrorKind k) {
    switch (k) {
        case ErrorKind::InvalidInput: return "invalid input";
        case ErrorKind::Numeric: return "numeric error";
        case ErrorKind::Divergence: return "divergence";
        case ErrorKind::Parse: return "parse error";
        case ErrorKind::DegenerateColumn: return "degenerate column";
        case ErrorKind::DegenerateMode: return "degenerate mode";
        case ErrorKind::Unsupported: return "unsupported configuration";
        case ErrorKind::Conditioning: return "ill-conditioned";
        case ErrorKind::Io: return "i/o error";
    }
    return "error";
}

/// Single exception type for the library; `kind()` lets callers (the CLI in
/// particular) map failures to exit codes without string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what) {
    if (!cond) fail(ErrorKind::InvalidInput, what);
}

}  // namespace nifkit
