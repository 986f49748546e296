// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace protonmt {

/// Thrown when an artifact is structurally valid input but incompatible with
/// the requested operation (wrong vocabulary, wrong model lineage, bad magic).
/// The CLI maps this to exit code 2.
class IncompatibleError : public std::runtime_error {
 public:
  explicit IncompatibleError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Thrown on bad user input (flags, config values). CLI exit code 1.
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// FNV-1a 64-bit, the lineage checksum used for vocabularies, corpora and
// parameter sets.
// ---------------------------------------------------------------------------

inline uint64_t fnv1a_init() { return 0xcbf29ce484222325ull; }

inline uint64_t fnv1a(uint64_t h, const void* data, size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a(uint64_t h, const std::string& s) {
  return fnv1a(h, s.data(), s.size());
}

template <typename T>
uint64_t fnv1a_pod(uint64_t h, const T& v) {
  return fnv1a(h, &v, sizeof(T));
}

// ---------------------------------------------------------------------------
// Little-endian binary IO helpers.
// ---------------------------------------------------------------------------

inline void write_u8(std::ostream& os, uint8_t v) { os.put(static_cast<char>(v)); }

inline void write_u16_le(std::ostream& os, uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  os.write(b, 2);
}

inline void write_u32_le(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline void write_f32_le(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32_le(os, bits);
}

inline uint8_t read_u8(std::istream& is) {
  int c = is.get();
  if (c == EOF) throw IncompatibleError("unexpected end of file");
  return static_cast<uint8_t>(c);
}

inline uint16_t read_u16_le(std::istream& is) {
  uint16_t v = read_u8(is);
  v |= static_cast<uint16_t>(read_u8(is)) << 8;
  return v;
}

inline uint32_t read_u32_le(std::istream& is) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(read_u8(is)) << (8 * i);
  return v;
}

inline float read_f32_le(std::istream& is) {
  uint32_t bits = read_u32_le(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void write_exact(std::ostream& os, const std::string& s) {
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_exact(std::istream& is, size_t n) {
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n)
    throw IncompatibleError("unexpected end of file");
  return s;
}

// ---------------------------------------------------------------------------
// key=value blocks (config echoes, file headers).
// ---------------------------------------------------------------------------

using KvMap = std::map<std::string, std::string>;

inline std::string kv_to_string(const KvMap& kv) {
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
  return os.str();
}

inline KvMap kv_from_string(const std::string& text) {
  KvMap kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw IncompatibleError("malformed key=value line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline const std::string& kv_require(const KvMap& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw IncompatibleError("missing header key: " + key);
  return it->second;
}

// ---------------------------------------------------------------------------
// Atomic file writes: temp file + rename, so readers never observe a
// partially written artifact.
// ---------------------------------------------------------------------------

template <typename WriteFn>
void atomic_write_file(const std::string& path, WriteFn&& fn, bool binary = true) {
  namespace fs = std::filesystem;
  fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, binary ? std::ios::binary | std::ios::trunc
                                 : std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + tmp.string());
    fn(os);
    os.flush();
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

inline void atomic_write_text(const std::string& path, const std::string& text) {
  atomic_write_file(path, [&](std::ostream& os) { write_exact(os, text); });
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open file: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace protonmt
