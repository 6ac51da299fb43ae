#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "bridgekit/errors.hpp"
#include "bridgekit/tensor.hpp"

namespace bridgekit::ad {

// CKPT container: little-endian, "CKPT" magic, version u32=1, count u32, then
// per tensor {name_len u32, name, ndim u32, dims u32..., f32 payload}. The
// byte layout is load-bearing: reproducibility tests compare files bitwise.

struct CkptEntry {
  Shape shape;
  std::vector<float> data;
};

using CkptItems = std::vector<std::pair<std::string, CkptEntry>>;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("checkpoint: unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(os, v);
}

inline float get_f32(std::istream& is) {
  std::uint32_t v = get_u32(is);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const CkptItems& items) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open for write: " + path);
  os.write("CKPT", 4);
  detail::put_u32(os, 1);
  detail::put_u32(os, static_cast<std::uint32_t>(items.size()));
  for (const auto& [name, entry] : items) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(entry.shape.size()));
    for (int d : entry.shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (float f : entry.data) detail::put_f32(os, f);
  }
  if (!os) throw IoError("checkpoint: write failed: " + path);
}

inline CkptItems load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CKPT", 4) != 0) throw IoError("checkpoint: bad magic in " + path);
  const std::uint32_t version = detail::get_u32(is);
  if (version != 1) throw IoError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = detail::get_u32(is);
  CkptItems items;
  items.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw IoError("checkpoint: truncated name in " + path);
    const std::uint32_t ndim = detail::get_u32(is);
    CkptEntry entry;
    std::int64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      entry.shape.push_back(static_cast<int>(detail::get_u32(is)));
      n *= entry.shape.back();
    }
    entry.data.resize(static_cast<std::size_t>(n));
    for (std::int64_t j = 0; j < n; ++j) entry.data[static_cast<std::size_t>(j)] = detail::get_f32(is);
    items.emplace_back(std::move(name), std::move(entry));
  }
  return items;
}

template <typename S>
CkptEntry to_ckpt_entry(const Tensor<S>& t) {
  CkptEntry e;
  e.shape = t.shape();
  e.data.resize(static_cast<std::size_t>(t.size()));
  for (std::int64_t i = 0; i < t.size(); ++i) e.data[static_cast<std::size_t>(i)] = static_cast<float>(t.data()[i]);
  return e;
}

// Copies entry values into an existing tensor; shape must match.
template <typename S>
void load_into(const CkptEntry& e, Tensor<S>& t) {
  if (e.shape != t.shape())
    throw IoError("checkpoint: shape mismatch " + shape_str(e.shape) + " vs " + shape_str(t.shape()));
  for (std::size_t i = 0; i < e.data.size(); ++i) t.data()[static_cast<std::int64_t>(i)] = static_cast<S>(e.data[i]);
}

}  // namespace bridgekit::ad
