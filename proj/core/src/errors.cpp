#include "ossod/errors.hpp"

namespace ossod {

const char* errc_name(errc c) {
    switch (c) {
        case errc::parse: return "parse";
        case errc::schema: return "schema";
        case errc::validation: return "validation";
        case errc::io: return "io";
        case errc::config: return "config";
        case errc::internal: return "internal";
    }
    return "unknown";
}

error::error(errc code, const std::string& message)
    : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

void fail(errc code, const std::string& message) {
    throw error(code, message);
}

}  // namespace ossod
