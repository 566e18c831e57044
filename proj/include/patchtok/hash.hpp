#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace patchtok {

// 64-bit FNV-1a over raw bytes. Used for parameter fingerprints, config
// hashes and dataset digests.
class Fnv1a {
 public:
  void update(const void* bytes, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::uint64_t value() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string hash_hex(std::string_view s) {
  Fnv1a h;
  h.update(s);
  return hex64(h.value());
}

}  // namespace patchtok
