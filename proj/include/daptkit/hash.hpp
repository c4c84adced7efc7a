#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace daptkit {

/// Incremental 64-bit FNV-1a. Used for content hashes in artifact headers.
class Fnv1a {
 public:
  void update(std::span<const std::byte> bytes);
  void update(std::string_view text);
  void update_u64(std::uint64_t value);
  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string to_hex(std::uint64_t value);
std::string hash_bytes(std::string_view bytes);
std::string hash_file(const std::string& path);

}  // namespace daptkit
