#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace terrapose {

/// Every failure raised by the library carries a stable, machine-readable
/// code (e.g. "OutOfExtent") plus a free-form detail string.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& detail)
        : std::runtime_error(code + ": " + detail), code_(std::move(code)), detail_(detail) {}

    const std::string& code() const noexcept { return code_; }
    const std::string& detail() const noexcept { return detail_; }

    /// Numerical failures (no consensus, divergence) as opposed to bad input.
    bool numerical() const noexcept {
        return code_ == "NoConsensus" || code_ == "Diverged" || code_ == "SingularInnovation" ||
               code_ == "DegenerateFit";
    }

private:
    std::string code_;
    std::string detail_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& detail) {
    throw Error(code, detail);
}

}  // namespace terrapose
