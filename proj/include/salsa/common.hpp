#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace salsa {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
/// Tensor/matrix dimension mismatches.
struct ShapeError : Error {
  using Error::Error;
};
/// Bad arguments, out-of-range ids, violated preconditions.
struct ValueError : Error {
  using Error::Error;
};
/// File format / filesystem problems.
struct IoError : Error {
  using Error::Error;
};
/// A byte stream that can never be extended into valid UTF-8.
struct Utf8StreamError : Error {
  using Error::Error;
};
/// NaN/Inf encountered where finite values are required.
struct NumericError : Error {
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValueError(msg);
}

inline void require_shape(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

// ---------------------------------------------------------------------------
// Seeding. All randomness flows from one global seed; each component derives
// its own stream by hashing its name into the seed, so adding a consumer
// never shifts another component's stream.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t derive_seed(uint64_t global_seed, std::string_view component) {
  return splitmix64(global_seed ^ fnv1a64(component));
}

inline std::mt19937_64 component_rng(uint64_t global_seed, std::string_view component) {
  return std::mt19937_64(derive_seed(global_seed, component));
}

// ---------------------------------------------------------------------------
// base64 (standard alphabet, '=' padding) for embedding f32 buffers in JSONL.
// ---------------------------------------------------------------------------

inline std::string base64_encode(const void* data, size_t n) {
  static constexpr char kTab[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  const auto* p = static_cast<const unsigned char*>(data);
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 3 <= n; i += 3) {
    uint32_t v = (uint32_t(p[i]) << 16) | (uint32_t(p[i + 1]) << 8) | p[i + 2];
    out.push_back(kTab[(v >> 18) & 63]);
    out.push_back(kTab[(v >> 12) & 63]);
    out.push_back(kTab[(v >> 6) & 63]);
    out.push_back(kTab[v & 63]);
  }
  if (i + 1 == n) {
    uint32_t v = uint32_t(p[i]) << 16;
    out.push_back(kTab[(v >> 18) & 63]);
    out.push_back(kTab[(v >> 12) & 63]);
    out += "==";
  } else if (i + 2 == n) {
    uint32_t v = (uint32_t(p[i]) << 16) | (uint32_t(p[i + 1]) << 8);
    out.push_back(kTab[(v >> 18) & 63]);
    out.push_back(kTab[(v >> 12) & 63]);
    out.push_back(kTab[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

inline std::vector<uint8_t> base64_decode(std::string_view s) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::vector<uint8_t> out;
  out.reserve(s.size() / 4 * 3);
  uint32_t acc = 0;
  int bits = 0;
  for (char c : s) {
    if (c == '=') break;
    int v = val(c);
    if (v < 0) throw ValueError("base64_decode: invalid character");
    acc = (acc << 6) | uint32_t(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(uint8_t((acc >> bits) & 0xff));
    }
  }
  return out;
}

}  // namespace salsa
