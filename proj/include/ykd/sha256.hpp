#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ykd {

// FIPS 180-4 SHA-256, used for parameter-invariance checks.
std::string sha256_hex(const uint8_t* data, size_t len);
inline std::string sha256_hex(const std::vector<uint8_t>& data) {
  return sha256_hex(data.data(), data.size());
}

}  // namespace ykd
