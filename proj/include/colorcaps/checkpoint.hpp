#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "colorcaps/tensor.hpp"

namespace colorcaps {

// Versioned named-tensor container, persisted as the `CCPS` binary format:
//   magic "CCPS", u32 version, u32 entry count;
//   per entry: u32 name length, name bytes, u32 rank, u32 extents..., f32 payload;
//   u32 metadata count; per pair: u32 key length, key, u32 value length, value.
// All integers and floats little-endian.

struct Checkpoint {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<float> data;
  };

  std::uint32_t version = 1;
  std::vector<Entry> entries;
  std::vector<std::pair<std::string, std::string>> metadata;

  void add(std::string name, const TensorF& tensor) {
    entries.push_back(Entry{std::move(name), tensor.shape, tensor.data});
  }

  const Entry* find(const std::string& name) const {
    for (const Entry& e : entries) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }

  const std::string* meta(const std::string& key) const {
    for (const auto& [k, v] : metadata) {
      if (k == key) return &v;
    }
    return nullptr;
  }

  void set_meta(std::string key, std::string value) {
    for (auto& [k, v] : metadata) {
      if (k == key) {
        v = std::move(value);
        return;
      }
    }
    metadata.emplace_back(std::move(key), std::move(value));
  }

  TensorF tensor(const std::string& name) const {
    const Entry* e = find(name);
    if (!e) throw io_error("checkpoint has no tensor named '" + name + "'");
    return TensorF(e->shape, e->data);
  }
};

namespace detail {

static_assert(std::numeric_limits<float>::is_iec559, "IEEE-754 float required");

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& path) {
  unsigned char bytes[4];
  in.read(reinterpret_cast<char*>(bytes), 4);
  if (in.gcount() != 4) throw io_error(path + ": truncated checkpoint");
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

inline void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in, const std::string& path) {
  const std::uint32_t len = get_u32(in, path);
  if (len > (1u << 20)) throw io_error(path + ": absurd string length in checkpoint");
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (static_cast<std::uint32_t>(in.gcount()) != len) throw io_error(path + ": truncated checkpoint");
  return s;
}

inline void put_f32(std::ostream& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

}  // namespace detail

constexpr char kCheckpointMagic[4] = {'C', 'C', 'P', 'S'};
constexpr std::uint32_t kCheckpointVersion = 1;

// Atomic save: written to a temp file in the target directory, then renamed.
inline void save_checkpoint(const std::string& path, const Checkpoint& cp) {
  {
    std::unordered_set<std::string> seen;
    for (const auto& e : cp.entries) {
      if (!seen.insert(e.name).second) {
        throw io_error("checkpoint has duplicate tensor name '" + e.name + "'");
      }
      if (shape_numel(e.shape) != e.data.size()) {
        throw io_error("checkpoint entry '" + e.name + "' has inconsistent shape");
      }
    }
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error(tmp + ": cannot open for writing");
    out.write(kCheckpointMagic, 4);
    detail::put_u32(out, cp.version);
    detail::put_u32(out, static_cast<std::uint32_t>(cp.entries.size()));
    for (const auto& e : cp.entries) {
      detail::put_string(out, e.name);
      detail::put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
      for (std::size_t ext : e.shape) detail::put_u32(out, static_cast<std::uint32_t>(ext));
      for (float f : e.data) detail::put_f32(out, f);
    }
    detail::put_u32(out, static_cast<std::uint32_t>(cp.metadata.size()));
    for (const auto& [k, v] : cp.metadata) {
      detail::put_string(out, k);
      detail::put_string(out, v);
    }
    if (!out) throw io_error(tmp + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error(path + ": cannot open");

  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw io_error(path + ": bad checkpoint magic");
  }
  Checkpoint cp;
  cp.version = detail::get_u32(in, path);
  if (cp.version != kCheckpointVersion) {
    throw io_error(path + ": unknown checkpoint version " + std::to_string(cp.version));
  }
  const std::uint32_t n_entries = detail::get_u32(in, path);
  std::unordered_set<std::string> seen;
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    Checkpoint::Entry e;
    e.name = detail::get_string(in, path);
    if (!seen.insert(e.name).second) {
      throw io_error(path + ": duplicate tensor name '" + e.name + "'");
    }
    const std::uint32_t rank = detail::get_u32(in, path);
    if (rank > 8) throw io_error(path + ": absurd tensor rank");
    std::size_t numel = 1;
    for (std::uint32_t a = 0; a < rank; ++a) {
      const std::uint32_t ext = detail::get_u32(in, path);
      e.shape.push_back(ext);
      numel *= ext;
    }
    if (numel > (std::size_t(1) << 31)) throw io_error(path + ": absurd tensor size");
    e.data.resize(numel);
    for (std::size_t j = 0; j < numel; ++j) {
      const std::uint32_t bits = detail::get_u32(in, path);
      std::memcpy(&e.data[j], &bits, 4);
    }
    cp.entries.push_back(std::move(e));
  }
  const std::uint32_t n_meta = detail::get_u32(in, path);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = detail::get_string(in, path);
    std::string v = detail::get_string(in, path);
    cp.metadata.emplace_back(std::move(k), std::move(v));
  }
  return cp;
}

// Copies checkpoint tensors into named destination slots. `name_map` pairs
// are (checkpoint entry name, destination slot name); untouched slots keep
// their current values.
inline void import_external(const Checkpoint& cp,
                            const std::vector<std::pair<std::string, TensorF*>>& slots,
                            const std::vector<std::pair<std::string, std::string>>& name_map) {
  for (const auto& [src, dst] : name_map) {
    const Checkpoint::Entry* e = cp.find(src);
    if (!e) throw io_error("import: checkpoint is missing tensor '" + src + "'");
    TensorF* slot = nullptr;
    for (const auto& [name, t] : slots) {
      if (name == dst) {
        slot = t;
        break;
      }
    }
    if (!slot) throw io_error("import: model has no slot named '" + dst + "'");
    if (slot->shape != e->shape) {
      throw io_error("import: tensor '" + src + "' has shape " + shape_str(e->shape) +
                     ", slot '" + dst + "' expects " + shape_str(slot->shape));
    }
    slot->data = e->data;
  }
}

}  // namespace colorcaps
