#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dsa {

using Rng = std::mt19937_64;

// Every random stream in a run is derived from the root seed by
//   splitmix64(root ^ fnv1a(component) ^ splitmix64(index))
// so that components (data, augmentation, model init, ...) never share
// draws and variants trained from one root seed see identical data.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view component,
                                 std::uint64_t index = 0) {
  return splitmix64(root ^ fnv1a(component) ^ splitmix64(index));
}

inline Rng make_rng(std::uint64_t root, std::string_view component,
                    std::uint64_t index = 0) {
  return Rng(derive_seed(root, component, index));
}

/// Incremental FNV-1a over raw bytes; used for data-stream checksums.
class StreamHash {
 public:
  void update(const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  template <typename T>
  void update_values(const T* data, std::size_t count) {
    update(data, count * sizeof(T));
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

}  // namespace dsa
