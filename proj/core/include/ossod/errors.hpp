#pragma once

#include <stdexcept>
#include <string>

namespace ossod {

// Error categories. Every failure raised by this library carries one so
// callers (and the CLI) can map failures to distinct exit codes.
enum class errc {
    parse,       // malformed input text (JSON syntax, bad PPM header, ...)
    schema,      // well-formed input with missing/mistyped fields
    validation,  // structurally fine but violates a documented invariant
    io,          // filesystem failures
    config,      // bad run configuration values
    internal,    // bug guard; should not be reachable from public APIs
};

const char* errc_name(errc c);

class error : public std::runtime_error {
  public:
    error(errc code, const std::string& message);
    errc code() const noexcept { return code_; }

  private:
    errc code_;
};

[[noreturn]] void fail(errc code, const std::string& message);

inline void require(bool ok, errc code, const std::string& message) {
    if (!ok) fail(code, message);
}

}  // namespace ossod
