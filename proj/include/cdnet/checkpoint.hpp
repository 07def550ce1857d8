#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cdnet/config.hpp"
#include "cdnet/model.hpp"
#include "cdnet/tensor.hpp"

namespace cdnet {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

namespace io {

inline void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
inline void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class T>
T get(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) throw IntegrityError("truncated " + what);
  return v;
}

inline std::string get_string(std::istream& in, const std::string& what, std::uint32_t limit = 1u << 24) {
  const auto len = get<std::uint32_t>(in, what);
  if (len > limit) throw IntegrityError("implausible length for " + what);
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (in.gcount() != static_cast<std::streamsize>(len)) throw IntegrityError("truncated " + what);
  return s;
}

}  // namespace io

/// Versioned parameter container.
///
/// Layout: "CDN1" | u32 len + config text (key=value lines) | u32 len + metadata text |
/// u32 blob count | per blob: u32 name len, UTF-8 name, u32 rank, rank x u64 extents,
/// product(extents) x f64. All integers and floats little-endian.
struct Checkpoint {
  CDNetConfig config;
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> blobs;

  const Tensor* find(const std::string& name) const {
    for (const auto& [k, t] : blobs)
      if (k == name) return &t;
    return nullptr;
  }

  const Tensor& require(const std::string& name) const {
    if (const Tensor* t = find(name)) return *t;
    throw IntegrityError("checkpoint has no blob named '" + name + "'");
  }

  void put(std::string name, Tensor t) {
    for (auto& [k, v] : blobs) {
      if (k == name) {
        v = std::move(t);
        return;
      }
    }
    blobs.emplace_back(std::move(name), std::move(t));
  }

  bool has_prefix(const std::string& prefix) const {
    for (const auto& [k, t] : blobs)
      if (k.rfind(prefix, 0) == 0) return true;
    return false;
  }
};

inline constexpr char kCheckpointMagic[4] = {'C', 'D', 'N', '1'};

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, 4);
  io::put_string(out, ck.config.to_text());
  std::string meta;
  for (const auto& [k, v] : ck.meta) meta += k + "=" + v + "\n";
  io::put_string(out, meta);
  io::put_u32(out, static_cast<std::uint32_t>(ck.blobs.size()));
  for (const auto& [name, t] : ck.blobs) {
    io::put_string(out, name);
    io::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) io::put_u64(out, e);
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw IoError("write failed for checkpoint " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw IntegrityError(path + ": not a CDN1 checkpoint");
  }
  Checkpoint ck;
  ck.config = config_from_text(io::get_string(in, "config record"));
  ck.meta = parse_key_values(io::get_string(in, "metadata record"));
  const auto count = io::get<std::uint32_t>(in, "blob count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = io::get_string(in, "blob name", 4096);
    const auto rank = io::get<std::uint32_t>(in, "blob rank");
    if (rank > 8) throw IntegrityError("blob '" + name + "' has implausible rank");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(io::get<std::uint64_t>(in, "blob extent"));
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(t.size() * sizeof(double))) {
      throw IntegrityError("truncated data for blob '" + name + "'");
    }
    ck.blobs.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

/// Appends every backbone parameter under `prefix`.
inline void store_params(Checkpoint& ck, const std::string& prefix, CDNetParams& params) {
  params.visit_all([&](const std::string& name, Var& v) { ck.put(prefix + name, v.value()); });
}

/// Copies blobs into `params`; every name must exist with a matching shape.
inline void load_params(const Checkpoint& ck, const std::string& prefix, CDNetParams& params) {
  params.visit_all([&](const std::string& name, Var& v) {
    const Tensor& t = ck.require(prefix + name);
    if (t.shape() != v.shape()) {
      throw IntegrityError("blob '" + prefix + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                           shape_str(v.shape()));
    }
    v.value() = t;
  });
}

}  // namespace cdnet
