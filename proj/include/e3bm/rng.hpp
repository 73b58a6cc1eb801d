#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace e3bm {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_tag(std::string_view tag) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Derive an independent stream seed from a root seed, a tag and indices.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag,
                                 std::initializer_list<std::uint64_t> indices = {}) noexcept {
  std::uint64_t s = mix64(root ^ mix64(hash_tag(tag)));
  for (std::uint64_t i : indices) s = mix64(s ^ mix64(i + 0x632be59bd9b4e019ULL));
  return s;
}

}  // namespace e3bm
