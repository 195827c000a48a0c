#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

#include "grasp/lora.hpp"
#include "grasp/masking.hpp"

namespace grasp {

// 64-bit FNV-1a. Used for config hashes, artifact digests and parameter
// checksums; not a cryptographic hash.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) noexcept {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= bytes[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) noexcept { update(s.data(), s.size()); }
  void update(std::span<const double> values) noexcept {
    update(values.data(), values.size_bytes());
  }
  std::uint64_t digest() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a(std::string_view s) {
  Fnv1a h;
  h.update(s);
  return h.digest();
}

inline std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t checksum(const MergedAdapterSet& params) {
  Fnv1a h;
  for (std::size_t t = 0; t < params.tensor_count(); ++t) h.update(params.tensor(t));
  return h.digest();
}

inline std::uint64_t checksum(const SparsityMask& mask) {
  Fnv1a h;
  for (const auto& keep : mask.keep) h.update(keep.data(), keep.size());
  return h.digest();
}

}  // namespace grasp
