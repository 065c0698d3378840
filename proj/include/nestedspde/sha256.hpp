#pragma once

#include <string>

namespace nspde {

// SHA-256 digest of the byte string, as 64 lowercase hex characters. Used to
// fingerprint configuration files in output headers.
std::string sha256_hex(const std::string& data);

}  // namespace nspde
