#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "salsa/common.hpp"
#include "salsa/tensor.hpp"

namespace salsa {

// Named-tensor archive. Layout (all integers little-endian):
//   magic "SALSACKPT1"
//   repeated: [name_len u32][name bytes][rank u32][dims rank*u32][data f32 * prod(dims)]
// Data is always stored as f32 regardless of the in-memory scalar type.
inline constexpr char kCheckpointMagic[] = "SALSACKPT1";
inline constexpr size_t kCheckpointMagicLen = 10;

struct RawTensorEntry {
  std::string name;
  Dims dims;
  std::vector<float> data;
};

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("checkpoint: truncated u32");
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

}  // namespace detail

inline void save_checkpoint_raw(const std::string& path, const std::vector<RawTensorEntry>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open for write: " + path);
  os.write(kCheckpointMagic, std::streamsize(kCheckpointMagicLen));
  for (const auto& e : entries) {
    detail::write_u32(os, uint32_t(e.name.size()));
    os.write(e.name.data(), std::streamsize(e.name.size()));
    detail::write_u32(os, uint32_t(e.dims.size()));
    for (int d : e.dims) detail::write_u32(os, uint32_t(d));
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(e.data.data()), std::streamsize(e.data.size() * 4));
  }
  if (!os) throw IoError("checkpoint: write failed: " + path);
}

inline std::vector<RawTensorEntry> load_checkpoint_raw(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open: " + path);
  char magic[kCheckpointMagicLen];
  is.read(magic, std::streamsize(kCheckpointMagicLen));
  if (!is || std::memcmp(magic, kCheckpointMagic, kCheckpointMagicLen) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  std::vector<RawTensorEntry> out;
  while (true) {
    is.peek();
    if (is.eof()) break;
    RawTensorEntry e;
    uint32_t name_len = detail::read_u32(is);
    e.name.resize(name_len);
    is.read(e.name.data(), std::streamsize(name_len));
    uint32_t rank = detail::read_u32(is);
    long count = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      uint32_t d = detail::read_u32(is);
      e.dims.push_back(int(d));
      count *= long(d);
    }
    e.data.resize(size_t(count));
    is.read(reinterpret_cast<char*>(e.data.data()), std::streamsize(e.data.size() * 4));
    if (!is) throw IoError("checkpoint: truncated tensor data for '" + e.name + "'");
    out.push_back(std::move(e));
  }
  return out;
}

template <typename S>
void save_checkpoint(const std::string& path, const std::vector<std::pair<std::string, Tensor<S>>>& named) {
  std::vector<RawTensorEntry> raw;
  raw.reserve(named.size());
  for (const auto& [name, t] : named) {
    RawTensorEntry e;
    e.name = name;
    e.dims = t.dims();
    e.data.assign(t.values().begin(), t.values().end());
    raw.push_back(std::move(e));
  }
  save_checkpoint_raw(path, raw);
}

/// Fills existing tensors by name. Every requested tensor must be present in
/// the file with matching dims; extra file entries are an error (the archive
/// and the model must describe the same parameter set).
template <typename S>
void load_checkpoint(const std::string& path, std::vector<std::pair<std::string, Tensor<S>>> named) {
  auto raw = load_checkpoint_raw(path);
  if (raw.size() != named.size())
    throw IoError("checkpoint: " + path + " has " + std::to_string(raw.size()) + " tensors, expected " +
                  std::to_string(named.size()));
  size_t i = 0;
  for (auto& [name, t] : named) {
    // Archives are written in registry order, so positional match is the
    // common case; fall back to a scan for robustness.
    const RawTensorEntry* e = nullptr;
    if (raw[i].name == name) {
      e = &raw[i];
    } else {
      for (const auto& cand : raw)
        if (cand.name == name) {
          e = &cand;
          break;
        }
    }
    if (!e) throw IoError("checkpoint: missing tensor '" + name + "' in " + path);
    if (e->dims != t.dims())
      throw IoError("checkpoint: dims mismatch for '" + name + "': file " + dims_str(e->dims) + " vs model " +
                    dims_str(t.dims()));
    for (size_t j = 0; j < e->data.size(); ++j) t.values()[j] = S(e->data[j]);
    ++i;
  }
}

/// Order-sensitive content hash of a parameter list (names, dims, raw bytes).
template <typename S>
uint64_t checksum_params(const std::vector<std::pair<std::string, Tensor<S>>>& named) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : named) {
    h = fnv1a64(name.data(), name.size(), h);
    for (int d : t.dims()) h = fnv1a64(&d, sizeof(d), h);
    h = fnv1a64(t.data(), t.values().size() * sizeof(S), h);
  }
  return h;
}

}  // namespace salsa
