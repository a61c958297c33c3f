#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace g2p {

// 64-bit FNV-1a. Used for vocabulary fingerprints, checkpoint checksums and
// input-file digests in run manifests.
class Fnv1a64 {
 public:
  static constexpr std::uint64_t kOffsetBasis = 0xcbf29ce484222325ULL;
  static constexpr std::uint64_t kPrime = 0x100000001b3ULL;

  void update(std::span<const std::byte> bytes) {
    for (std::byte b : bytes) {
      state_ ^= static_cast<std::uint64_t>(b);
      state_ *= kPrime;
    }
  }

  void update(std::string_view text) {
    update(std::as_bytes(std::span<const char>(text.data(), text.size())));
  }

  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = kOffsetBasis;
};

inline std::uint64_t fnv1a64(std::string_view text) {
  Fnv1a64 h;
  h.update(text);
  return h.digest();
}

inline std::uint64_t fnv1a64(std::span<const std::byte> bytes) {
  Fnv1a64 h;
  h.update(bytes);
  return h.digest();
}

}  // namespace g2p
