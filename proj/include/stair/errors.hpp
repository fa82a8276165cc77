#pragma once

#include <stdexcept>
#include <string>

namespace stair {

enum class ErrorCode {
    InvalidArgument = 1,
    Io = 2,
    Format = 3,
    Numeric = 4,
    Config = 5,
};

/// Base exception for every failure raised by the library. The C API maps
/// the code onto its status enum.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] void throw_invalid(const std::string& what);
[[noreturn]] void throw_io(const std::string& what);
[[noreturn]] void throw_format(const std::string& what);
[[noreturn]] void throw_numeric(const std::string& what);
[[noreturn]] void throw_config(const std::string& what);

} // namespace stair
