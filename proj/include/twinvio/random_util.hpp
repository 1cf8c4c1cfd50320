#pragma once

#include <cstdint>
#include <string_view>

namespace twinvio {

constexpr std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 14695981039346656037ull;
  for (char c : data) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 1099511628211ull;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives an independent named sub-stream from one root seed so each
// component (imu, pixels, gnss, ...) can be re-run in isolation.
constexpr std::uint64_t substream_seed(std::uint64_t root, std::string_view name) {
  return splitmix64(root ^ fnv1a64(name));
}

}  // namespace twinvio
