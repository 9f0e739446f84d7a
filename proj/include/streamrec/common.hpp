#pragma once

#include <stdexcept>
#include <string>

namespace streamrec {

#ifdef STREAMREC_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

/// Error taxonomy shared by all modules. The CLI maps usage-class codes
/// (Usage, Parse, Config) to exit code 2 and everything else to 1.
enum class ErrorCode {
    Dimension,
    Domain,
    Usage,
    Numeric,
    Parse,
    Config,
    Io,
    Sampling,
    Degenerate,
    Matching,
    Consistency,
    Version,
    EmptyInput,
    Index,
    UndefinedMetric,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

    bool is_usage_class() const noexcept {
        return code_ == ErrorCode::Usage || code_ == ErrorCode::Parse ||
               code_ == ErrorCode::Config;
    }

private:
    ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

} // namespace streamrec
