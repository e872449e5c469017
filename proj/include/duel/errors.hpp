#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace duel {

enum class ErrorKind {
    parse,
    schema,
    shape,
    parameter,
    empty_pose,
    degenerate_pose,
    resolution,
    arity,
    io,
    sampling,
    data,
    policy,
    divergence,
    invariant,
};

constexpr std::string_view kind_name(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::parse: return "parse";
        case ErrorKind::schema: return "schema";
        case ErrorKind::shape: return "shape";
        case ErrorKind::parameter: return "parameter";
        case ErrorKind::empty_pose: return "empty_pose";
        case ErrorKind::degenerate_pose: return "degenerate_pose";
        case ErrorKind::resolution: return "resolution";
        case ErrorKind::arity: return "arity";
        case ErrorKind::io: return "io";
        case ErrorKind::sampling: return "sampling";
        case ErrorKind::data: return "data";
        case ErrorKind::policy: return "policy";
        case ErrorKind::divergence: return "divergence";
        case ErrorKind::invariant: return "invariant";
    }
    return "unknown";
}

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) fail(kind, message);
}

}  // namespace duel
