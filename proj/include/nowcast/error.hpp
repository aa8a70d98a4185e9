#pragma once

#include <stdexcept>
#include <string>

namespace nowcast {

// Broad failure classes; the CLI maps these onto process exit codes.
enum class ErrorCode {
    config,        // bad configuration or config file
    shape,         // shape inference / tensor shape violation
    odd_crop,      // center-crop difference is odd where parity is required
    negative_extent,
    data,          // dataset / sampling preconditions
    io,            // file format, magic, version
    truncated_file,
    config_hash_mismatch,
    numeric        // divergence, non-finite values
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& msg)
        : std::runtime_error(msg), code_(code) {}

    ErrorCode code() const { return code_; }

    // Exit code contract: 0 success, 2 config, 3 data, 4 numeric divergence.
    int exit_code() const {
        switch (code_) {
        case ErrorCode::config: return 2;
        case ErrorCode::numeric: return 4;
        default: return 3;
        }
    }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) {
    throw Error(code, msg);
}

} // namespace nowcast
