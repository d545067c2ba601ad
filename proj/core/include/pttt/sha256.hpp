#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

namespace pttt {

// Incremental SHA-256 for checkpoint integrity trailers and the hash stamps
// in result files.
class Sha256 {
 public:
  Sha256() { reset(); }

  void reset();
  void update(const void* data, std::size_t len);
  std::array<std::uint8_t, 32> finish();

  static std::string hex_digest(const void* data, std::size_t len);
  static std::string hex_digest(const std::string& data) {
    return hex_digest(data.data(), data.size());
  }

 private:
  void process_block(const std::uint8_t* block);

  std::uint32_t state_[8];
  std::uint64_t total_len_ = 0;
  std::uint8_t buffer_[64];
  std::size_t buffer_len_ = 0;
};

std::string to_hex(const std::array<std::uint8_t, 32>& digest);

}  // namespace pttt
