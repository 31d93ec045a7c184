#pragma once

// Binary weight container. Layout, all integers little-endian:
//   "XFW1" | version u32 | entry count u32 |
//   per entry: name length u32 | name bytes | rank u32 | dims u32*rank |
//              payload as 32-bit floats
// Entries are the registry's learnable parameters followed by its running
// stat buffers, in registration order. Loading is two-phase: every name and
// shape is verified against the live registry before any buffer is written,
// so a mismatch never leaves a half-loaded model.

#include "xformer/blocks.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace xf {

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {
      static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
      static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4)
    throw ArchiveError(std::string("archive: truncated reading ") + what);
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& out, float f) {
  write_u32(out, std::bit_cast<std::uint32_t>(f));
}

inline float read_f32(std::istream& in, const char* what) {
  return std::bit_cast<float>(read_u32(in, what));
}

}  // namespace detail

struct ArchiveEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

inline constexpr char archive_magic[4] = {'X', 'F', 'W', '1'};
inline constexpr std::uint32_t archive_version = 1;

template <typename Scalar>
void save_archive(const ParamRegistry<Scalar>& reg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out.good()) throw ArchiveError("archive: cannot open " + path);
  out.write(archive_magic, 4);
  detail::write_u32(out, archive_version);
  const std::size_t count = reg.params.size() + reg.buffers.size();
  detail::write_u32(out, static_cast<std::uint32_t>(count));
  auto write_entry = [&out](const std::string& name,
                            const Tensor<Scalar>& t) {
    detail::write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Shape& sh = t.shape();
    detail::write_u32(out, static_cast<std::uint32_t>(sh.size()));
    for (int d : sh) detail::write_u32(out, static_cast<std::uint32_t>(d));
    const Scalar* d = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i)
      detail::write_f32(out, static_cast<float>(d[i]));
  };
  for (const auto& [name, t] : reg.params) write_entry(name, t);
  for (const auto& [name, t] : reg.buffers) write_entry(name, t);
  if (!out.good()) throw ArchiveError("archive: write failed for " + path);
}

inline std::vector<ArchiveEntry> read_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw ArchiveError("archive: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || !std::equal(magic, magic + 4, archive_magic))
    throw ArchiveError("archive: bad magic in " + path);
  const std::uint32_t version = detail::read_u32(in, "version");
  if (version != archive_version)
    throw ArchiveError("archive: unsupported version " +
                       std::to_string(version));
  const std::uint32_t count = detail::read_u32(in, "entry count");
  if (count > 1u << 20) throw ArchiveError("archive: implausible entry count");
  std::vector<ArchiveEntry> entries;
  entries.reserve(count);
  for (std::uint32_t e = 0; e < count; ++e) {
    ArchiveEntry ent;
    const std::uint32_t name_len = detail::read_u32(in, "name length");
    if (name_len > 4096) throw ArchiveError("archive: implausible name length");
    ent.name.resize(name_len);
    in.read(ent.name.data(), name_len);
    if (in.gcount() != static_cast<std::streamsize>(name_len))
      throw ArchiveError("archive: truncated reading name");
    const std::uint32_t rank = detail::read_u32(in, "rank");
    if (rank > 8) throw ArchiveError("archive: implausible rank");
    std::int64_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint32_t d = detail::read_u32(in, "dim");
      if (d == 0 || d > 1u << 24)
        throw ArchiveError("archive: implausible dim in " + ent.name);
      ent.shape.push_back(static_cast<int>(d));
      n *= d;
    }
    if (n > (std::int64_t{1} << 28))
      throw ArchiveError("archive: implausible entry size in " + ent.name);
    ent.data.resize(static_cast<std::size_t>(n));
    for (auto& f : ent.data) f = detail::read_f32(in, ent.name.c_str());
    entries.push_back(std::move(ent));
  }
  in.peek();
  if (!in.eof()) throw ArchiveError("archive: trailing bytes in " + path);
  return entries;
}

// Verify-then-commit load: the registry's full name/shape set must match the
// archive exactly; the first registry entry the archive is missing or
// mis-shapes names the error, and archive-only entries are likewise fatal.
template <typename Scalar>
void load_archive_into(const ParamRegistry<Scalar>& reg,
                       const std::string& path) {
  const std::vector<ArchiveEntry> entries = read_archive(path);
  std::unordered_map<std::string, const ArchiveEntry*> by_name;
  for (const auto& e : entries) {
    if (!by_name.emplace(e.name, &e).second)
      throw ArchiveError("archive: duplicate entry " + e.name);
  }
  auto all = reg.params;
  all.insert(all.end(), reg.buffers.begin(), reg.buffers.end());
  for (const auto& [name, t] : all) {
    const auto it = by_name.find(name);
    if (it == by_name.end())
      throw ArchiveError("archive: missing parameter " + name);
    if (it->second->shape != t.shape())
      throw ArchiveError("archive: shape mismatch for " + name + ": model " +
                         shape_str(t.shape()) + " vs archive " +
                         shape_str(it->second->shape));
  }
  if (by_name.size() != all.size())
    for (const auto& e : entries) {
      bool known = false;
      for (const auto& [name, t] : all) known = known || name == e.name;
      if (!known) throw ArchiveError("archive: unknown parameter " + e.name);
    }
  for (auto& [name, t] : all) {
    const ArchiveEntry& e = *by_name.at(name);
    Scalar* d = t.data();
    for (std::size_t i = 0; i < e.data.size(); ++i)
      d[i] = static_cast<Scalar>(e.data[i]);
  }
}

}  // namespace xf
