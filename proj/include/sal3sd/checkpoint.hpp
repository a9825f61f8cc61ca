#pragma once

// Single-file tensor container.
//
//   magic    "S3SDCKPT"                      8 bytes
//   version  u32 length + UTF-8 bytes
//   meta     u32 length + UTF-8 bytes        (key=value lines; the arch descriptor lives here)
//   count    u64
//   per tensor:
//     name   u32 length + bytes
//     dtype  u8  (1 = float64 little-endian)
//     rank   u32, dims u64 * rank
//     data   row-major raw values
//
// Values are copied byte-for-byte, so load(save(x)) is bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sal3sd/model.hpp"

namespace sal3sd {

inline constexpr char kCheckpointMagic[8] = {'S', '3', 'S', 'D', 'C', 'K', 'P', 'T'};
inline constexpr const char* kCheckpointVersion = "sal3sd-checkpoint/1";

struct Container {
  std::string version = kCheckpointVersion;
  std::string meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw IoError("checkpoint has no tensor '" + name + "'");
  }
  bool has(const std::string& name) const {
    for (const auto& [n, _] : tensors)
      if (n == name) return true;
    return false;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError("truncated checkpoint: " + path);
  return v;
}

inline std::string get_string(std::istream& is, const std::string& path) {
  const auto n = get<std::uint32_t>(is, path);
  if (n > (1u << 26)) throw IoError("corrupt string length in checkpoint: " + path);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw IoError("truncated checkpoint: " + path);
  return s;
}

}  // namespace detail

inline void write_container(const std::filesystem::path& path, const Container& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + tmp);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put_string(os, c.version);
    detail::put_string(os, c.meta);
    detail::put<std::uint64_t>(os, c.tensors.size());
    for (const auto& [name, t] : c.tensors) {
      detail::put_string(os, name);
      detail::put<std::uint8_t>(os, 1);
      detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (int d : t.shape()) detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(d));
      os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw IoError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Container read_container(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + p);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw IoError("not a checkpoint file: " + p);
  Container c;
  c.version = detail::get_string(is, p);
  if (c.version != kCheckpointVersion) throw IoError("unsupported checkpoint version '" + c.version + "' in " + p);
  c.meta = detail::get_string(is, p);
  const auto count = detail::get<std::uint64_t>(is, p);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = detail::get_string(is, p);
    if (detail::get<std::uint8_t>(is, p) != 1) throw IoError("unsupported element type for '" + name + "' in " + p);
    const auto rank = detail::get<std::uint32_t>(is, p);
    if (rank > 8) throw IoError("corrupt rank for '" + name + "' in " + p);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<int>(detail::get<std::uint64_t>(is, p)));
    Tensor t(shape);
    if (t.size() && !is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
      throw IoError("truncated tensor '" + name + "' in " + p);
    }
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  return c;
}

/// Meta block helpers: "key=value" lines.
inline std::map<std::string, std::string> parse_meta(const std::string& meta) {
  std::map<std::string, std::string> kv;
  std::size_t pos = 0;
  while (pos < meta.size()) {
    auto end = meta.find('\n', pos);
    if (end == std::string::npos) end = meta.size();
    const std::string line = meta.substr(pos, end - pos);
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    pos = end + 1;
  }
  return kv;
}

/// Arch descriptor lines, prefixed "arch." inside the meta block.
inline std::string arch_meta(const Arch& a) {
  std::string out;
  std::string text = a.to_text();
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    out += "arch." + text.substr(pos, end - pos) + "\n";
    pos = end + 1;
  }
  return out;
}

inline Arch arch_from_meta(const std::map<std::string, std::string>& kv) {
  std::string text;
  for (const auto& [k, v] : kv)
    if (k.rfind("arch.", 0) == 0) text += k.substr(5) + "=" + v + "\n";
  if (text.empty()) throw IoError("checkpoint carries no arch descriptor");
  return Arch::from_text(text);
}

inline void append_state(Container& c, const std::string& prefix, const ModelState& st) {
  for (const auto& [name, t] : st.params) c.tensors.emplace_back(prefix + name, t);
}

/// Extracts the tensors under `prefix` and checks them against the arch.
inline ModelState extract_state(const Container& c, const std::string& prefix, const Arch& arch) {
  ModelState st = init_model(arch, 0);
  for (auto& [name, t] : st.params) {
    const Tensor& src = c.get(prefix + name);
    if (src.shape() != t.shape()) {
      throw IoError("checkpoint tensor '" + prefix + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                    shape_str(t.shape()));
    }
    t = src;
  }
  return st;
}

inline void save_model(const std::filesystem::path& path, const ModelState& st) {
  Container c;
  c.meta = arch_meta(st.arch);
  append_state(c, "", st);
  write_container(path, c);
}

/// Loads a model checkpoint. Training checkpoints are accepted too; their
/// student weights are returned.
inline ModelState load_model(const std::filesystem::path& path) {
  Container c = read_container(path);
  const Arch arch = arch_from_meta(parse_meta(c.meta));
  const bool training = c.has("student/cls.head.w");
  return extract_state(c, training ? "student/" : "", arch);
}

}  // namespace sal3sd
