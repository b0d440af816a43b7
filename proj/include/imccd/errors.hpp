#pragma once

#include <stdexcept>
#include <string>

namespace imccd {

enum class ErrorKind {
    input,     // malformed or inconsistent caller input
    config,    // invalid configuration values
    format,    // on-disk format violations
    numeric,   // NaN / non-finite values where finite ones are required
    internal,  // broken invariants inside the library
    usage,     // CLI usage problems
    data,      // schema violations in data files
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct InputError : Error {
    explicit InputError(const std::string& w) : Error(ErrorKind::input, w) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& w) : Error(ErrorKind::config, w) {}
};
struct FormatError : Error {
    explicit FormatError(const std::string& w) : Error(ErrorKind::format, w) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& w) : Error(ErrorKind::numeric, w) {}
};
struct InternalError : Error {
    explicit InternalError(const std::string& w) : Error(ErrorKind::internal, w) {}
};
struct UsageError : Error {
    explicit UsageError(const std::string& w) : Error(ErrorKind::usage, w) {}
};
struct DataError : Error {
    explicit DataError(const std::string& w) : Error(ErrorKind::data, w) {}
};

}  // namespace imccd
