#pragma once

#include <stdexcept>
#include <string>

namespace diffdti {

// Error taxonomy. CLI exit codes: Config -> 2, everything else -> 1.
enum class ErrorKind {
    Config,
    Usage,
    Data,
    Io,
    Shape,
    Numeric,
    Conditioning,
    InsufficientData,
    Evaluation,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string msg)
        : std::runtime_error(std::move(msg)), kind_(kind) {}
    ErrorKind kind() const { return kind_; }
    int exit_code() const {
        return (kind_ == ErrorKind::Config || kind_ == ErrorKind::Usage) ? 2 : 1;
    }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

} // namespace diffdti
