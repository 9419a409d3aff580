#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace icufeat {

/// FIPS 180-4 SHA-256, hex digest. Used for artifact manifests and adapter
/// fingerprints; not performance critical.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file_hex(const std::string& path);

} // namespace icufeat
