#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "salsa/common.hpp"

namespace salsa::utf8 {

// Classification of one maximal code-point attempt starting at a byte.
//   len > 0   : a complete, valid sequence of `len` bytes
//   len == 0  : valid so far but truncated (could complete with more bytes)
//   len == -1 : can never extend to valid UTF-8
//
// Validation follows RFC 3629: no overlong forms, no surrogates, max U+10FFFF.
inline int classify_sequence(const uint8_t* p, size_t n) {
  if (n == 0) return 0;
  uint8_t b0 = p[0];
  if (b0 < 0x80) return 1;
  if (b0 < 0xc2) return -1;  // stray continuation byte or overlong 2-byte lead
  int len;
  uint8_t lo = 0x80, hi = 0xbf;  // allowed range for the first continuation
  if (b0 <= 0xdf) {
    len = 2;
  } else if (b0 <= 0xef) {
    len = 3;
    if (b0 == 0xe0) lo = 0xa0;        // overlong
    if (b0 == 0xed) hi = 0x9f;        // surrogates
  } else if (b0 <= 0xf4) {
    len = 4;
    if (b0 == 0xf0) lo = 0x90;        // overlong
    if (b0 == 0xf4) hi = 0x8f;        // > U+10FFFF
  } else {
    return -1;
  }
  for (int i = 1; i < len; ++i) {
    if (size_t(i) >= n) return 0;  // truncated, still extendable
    uint8_t b = p[i];
    uint8_t l = (i == 1) ? lo : uint8_t(0x80);
    uint8_t h = (i == 1) ? hi : uint8_t(0xbf);
    if (b < l || b > h) return -1;
  }
  return len;
}

struct PrefixSplit {
  std::string complete;          // longest valid prefix ending on a code-point boundary
  std::vector<uint8_t> remainder;  // the rest (at most 3 bytes for extendable streams)
};

/// Splits a byte stream into its longest complete-UTF-8 prefix and the
/// trailing bytes of an unfinished code point. Throws Utf8StreamError if the
/// stream contains a sequence that no suffix can ever repair.
inline PrefixSplit complete_prefix(const uint8_t* data, size_t n) {
  size_t i = 0;
  while (i < n) {
    int len = classify_sequence(data + i, n - i);
    if (len > 0) {
      i += size_t(len);
    } else if (len == 0) {
      break;
    } else {
      throw Utf8StreamError("invalid UTF-8 sequence at byte offset " + std::to_string(i));
    }
  }
  PrefixSplit out;
  out.complete.assign(reinterpret_cast<const char*>(data), i);
  out.remainder.assign(data + i, data + n);
  return out;
}

inline PrefixSplit complete_prefix(const std::vector<uint8_t>& bytes) {
  return complete_prefix(bytes.data(), bytes.size());
}

inline PrefixSplit complete_prefix(std::string_view bytes) {
  return complete_prefix(reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size());
}

/// True if the whole stream is valid UTF-8 ending on a code-point boundary.
inline bool is_complete(std::string_view bytes) {
  try {
    return complete_prefix(bytes).remainder.empty();
  } catch (const Utf8StreamError&) {
    return false;
  }
}

inline std::vector<uint32_t> decode_code_points(std::string_view text) {
  std::vector<uint32_t> out;
  const auto* p = reinterpret_cast<const uint8_t*>(text.data());
  size_t n = text.size(), i = 0;
  while (i < n) {
    int len = classify_sequence(p + i, n - i);
    if (len <= 0) throw ValueError("decode_code_points: input is not complete valid UTF-8");
    uint32_t cp;
    if (len == 1) {
      cp = p[i];
    } else {
      cp = p[i] & (0x7f >> len);
      for (int k = 1; k < len; ++k) cp = (cp << 6) | (p[i + k] & 0x3f);
    }
    out.push_back(cp);
    i += size_t(len);
  }
  return out;
}

inline std::string encode_code_point(uint32_t cp) {
  std::string s;
  if (cp < 0x80) {
    s.push_back(char(cp));
  } else if (cp < 0x800) {
    s.push_back(char(0xc0 | (cp >> 6)));
    s.push_back(char(0x80 | (cp & 0x3f)));
  } else if (cp < 0x10000) {
    require(cp < 0xd800 || cp > 0xdfff, "encode_code_point: surrogate");
    s.push_back(char(0xe0 | (cp >> 12)));
    s.push_back(char(0x80 | ((cp >> 6) & 0x3f)));
    s.push_back(char(0x80 | (cp & 0x3f)));
  } else {
    require(cp <= 0x10ffff, "encode_code_point: beyond U+10FFFF");
    s.push_back(char(0xf0 | (cp >> 18)));
    s.push_back(char(0x80 | ((cp >> 12) & 0x3f)));
    s.push_back(char(0x80 | ((cp >> 6) & 0x3f)));
    s.push_back(char(0x80 | (cp & 0x3f)));
  }
  return s;
}

/// Drops any bytes that do not form complete valid sequences (including a
/// trailing truncated code point). Used to make raw token bytes scoreable.
inline std::string sanitize(std::string_view bytes) {
  std::string out;
  const auto* p = reinterpret_cast<const uint8_t*>(bytes.data());
  size_t n = bytes.size(), i = 0;
  while (i < n) {
    int len = classify_sequence(p + i, n - i);
    if (len > 0) {
      out.append(bytes.substr(i, size_t(len)));
      i += size_t(len);
    } else if (len == 0) {
      break;  // truncated tail
    } else {
      ++i;  // skip the offending byte
    }
  }
  return out;
}

/// Accumulates raw token bytes until they form complete UTF-8.
///
/// The decode loop's chunking is all-or-nothing: a chunk is released only
/// when the *entire* pending buffer ends on a code-point boundary. After any
/// release the buffer is empty; between releases it may hold a partial code
/// point (at most 3 bytes when tokens decode to single bytes).
class ByteBuffer {
 public:
  void append(std::string_view bytes) { pending_.insert(pending_.end(), bytes.begin(), bytes.end()); }

  /// All-or-nothing release. Throws Utf8StreamError on unrepairable streams.
  std::optional<std::string> take_if_complete() {
    if (pending_.empty()) return std::nullopt;
    PrefixSplit split = complete_prefix(pending_);
    if (!split.remainder.empty()) return std::nullopt;
    pending_.clear();
    return std::move(split.complete);
  }

  /// Releases the longest complete prefix, keeping only the unfinished tail.
  std::string flush_longest() {
    PrefixSplit split = complete_prefix(pending_);
    pending_ = std::move(split.remainder);
    return std::move(split.complete);
  }

  const std::vector<uint8_t>& pending() const { return pending_; }
  bool empty() const { return pending_.empty(); }
  void clear() { pending_.clear(); }

 private:
  std::vector<uint8_t> pending_;
};

}  // namespace salsa::utf8
