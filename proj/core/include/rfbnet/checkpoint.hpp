#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "rfbnet/common.hpp"
#include "rfbnet/param.hpp"

namespace rfbnet {

// Little-endian binary container of named tensors.
//
//   magic   8 bytes "RFBCKPT1"
//   version u32 (= 1)
//   count   u32
//   entry*: name_len u32, name bytes, dtype u8 (1 = f32, 2 = f64),
//           extents 4 x u32 (n, c, h, w), raw values
//
// Round-trips are bit-exact.
struct CheckpointEntry {
  std::string name;
  std::uint8_t dtype = 0;  // 1 = f32, 2 = f64
  Shape4 shape{};
  std::vector<std::uint8_t> raw;

  std::size_t scalar_size() const { return dtype == 1 ? 4 : 8; }

  template <typename T>
  std::vector<T> as() const {
    const std::size_t n = shape.numel();
    std::vector<T> out(n);
    if ((dtype == 1 && sizeof(T) == 4) || (dtype == 2 && sizeof(T) == 8)) {
      std::memcpy(out.data(), raw.data(), raw.size());
    } else if (dtype == 1) {
      const float* p = reinterpret_cast<const float*>(raw.data());
      for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(p[i]);
    } else {
      const double* p = reinterpret_cast<const double*>(raw.data());
      for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(p[i]);
    }
    return out;
  }
};

struct Checkpoint {
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  template <typename T>
  void add(const std::string& name, const Shape4& shape, const std::vector<T>& values) {
    CheckpointEntry e;
    e.name = name;
    e.dtype = sizeof(T) == 4 ? 1 : 2;
    e.shape = shape;
    e.raw.resize(values.size() * sizeof(T));
    std::memcpy(e.raw.data(), values.data(), e.raw.size());
    entries.push_back(std::move(e));
  }
};

namespace detail {
inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'R', 'F', 'B', 'C', 'K', 'P', 'T', '1'};

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(detail::cat("cannot open for writing: ", path));
  os.write(kCheckpointMagic, 8);
  detail::write_u32(os, 1);
  detail::write_u32(os, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    detail::write_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    os.put(static_cast<char>(e.dtype));
    detail::write_u32(os, static_cast<std::uint32_t>(e.shape.n));
    detail::write_u32(os, static_cast<std::uint32_t>(e.shape.c));
    detail::write_u32(os, static_cast<std::uint32_t>(e.shape.h));
    detail::write_u32(os, static_cast<std::uint32_t>(e.shape.w));
    os.write(reinterpret_cast<const char*>(e.raw.data()), static_cast<std::streamsize>(e.raw.size()));
  }
  if (!os) throw IoError(detail::cat("write failed: ", path));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(detail::cat("cannot open for reading: ", path));
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw IoError(detail::cat("bad checkpoint magic in ", path));
  }
  const std::uint32_t version = detail::read_u32(is);
  if (version != 1) throw IoError(detail::cat("unsupported checkpoint version ", version));
  const std::uint32_t count = detail::read_u32(is);
  Checkpoint ckpt;
  ckpt.entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const std::uint32_t name_len = detail::read_u32(is);
    e.name.resize(name_len);
    is.read(e.name.data(), name_len);
    e.dtype = static_cast<std::uint8_t>(is.get());
    if (e.dtype != 1 && e.dtype != 2) throw IoError(detail::cat("bad dtype tag in ", path));
    e.shape.n = static_cast<int>(detail::read_u32(is));
    e.shape.c = static_cast<int>(detail::read_u32(is));
    e.shape.h = static_cast<int>(detail::read_u32(is));
    e.shape.w = static_cast<int>(detail::read_u32(is));
    e.raw.resize(e.shape.numel() * e.scalar_size());
    is.read(reinterpret_cast<char*>(e.raw.data()), static_cast<std::streamsize>(e.raw.size()));
    if (!is) throw IoError(detail::cat("truncated checkpoint: ", path));
    ckpt.entries.push_back(std::move(e));
  }
  return ckpt;
}

// Serialize a registry (params then buffers, registration order).
template <typename T>
Checkpoint registry_to_checkpoint(const Registry<T>& reg) {
  Checkpoint ckpt;
  for (const auto& e : reg.params) ckpt.add(e.name, e.param->shape(), e.param->t.values());
  for (const auto& e : reg.buffers) {
    ckpt.add(e.name, Shape4{1, static_cast<int>(e.data->size()), 1, 1}, *e.data);
  }
  return ckpt;
}

// Load values into a registry by name. Every registry entry must be present
// with a matching shape; all mismatches are reported together.
template <typename T>
void checkpoint_to_registry(const Checkpoint& ckpt, Registry<T>& reg) {
  std::vector<std::string> problems;
  for (auto& e : reg.params) {
    const CheckpointEntry* src = ckpt.find(e.name);
    if (!src) {
      problems.push_back(detail::cat("missing param ", e.name));
      continue;
    }
    if (!(src->shape == e.param->shape())) {
      problems.push_back(detail::cat("shape mismatch for ", e.name, ": checkpoint ",
                                     src->shape.str(), " vs model ", e.param->shape().str()));
      continue;
    }
    e.param->t.values() = src->as<T>();
  }
  for (auto& e : reg.buffers) {
    const CheckpointEntry* src = ckpt.find(e.name);
    if (!src) {
      problems.push_back(detail::cat("missing buffer ", e.name));
      continue;
    }
    if (src->shape.numel() != e.data->size()) {
      problems.push_back(detail::cat("size mismatch for buffer ", e.name));
      continue;
    }
    *e.data = src->as<T>();
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint incompatible with model:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ShapeError(msg);
  }
}

}  // namespace rfbnet
