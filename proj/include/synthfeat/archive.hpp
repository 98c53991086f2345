#pragma once

// Minimal POSIX ustar reader/writer: regular files only, names up to 100
// bytes (or 255 with the ustar prefix field), no timestamps so archives of
// equal content are byte-identical.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "synthfeat/errors.hpp"

namespace synthfeat::tar {

namespace fs = std::filesystem;

using Entries = std::vector<std::pair<std::string, std::string>>;  // name, bytes

namespace detail {

inline void put_octal(char* field, std::size_t width, unsigned long long v) {
  std::snprintf(field, width, "%0*llo", static_cast<int>(width - 1), v);
}

inline unsigned long long get_octal(const char* field, std::size_t width) {
  unsigned long long v = 0;
  for (std::size_t i = 0; i < width && field[i]; ++i) {
    if (field[i] == ' ') continue;
    if (field[i] < '0' || field[i] > '7') break;
    v = v * 8 + static_cast<unsigned>(field[i] - '0');
  }
  return v;
}

inline void header(std::string& out, const std::string& name, std::size_t size) {
  char h[512] = {};
  std::string prefix, base = name;
  if (name.size() > 100) {
    auto cut = name.rfind('/', 155);
    if (cut == std::string::npos || name.size() - cut - 1 > 100) throw IoError("archive member name too long: " + name);
    prefix = name.substr(0, cut);
    base = name.substr(cut + 1);
  }
  std::memcpy(h, base.data(), base.size());
  put_octal(h + 100, 8, 0644);
  put_octal(h + 108, 8, 0);
  put_octal(h + 116, 8, 0);
  put_octal(h + 124, 12, size);
  put_octal(h + 136, 12, 0);
  h[156] = '0';
  std::memcpy(h + 257, "ustar", 6);
  std::memcpy(h + 263, "00", 2);
  std::memcpy(h + 345, prefix.data(), prefix.size());
  std::memset(h + 148, ' ', 8);
  unsigned sum = 0;
  for (unsigned char c : h) sum += c;
  std::snprintf(h + 148, 8, "%06o", sum);
  h[155] = ' ';
  out.append(h, 512);
}

}  // namespace detail

inline std::string pack(const Entries& entries) {
  std::string out;
  for (const auto& [name, bytes] : entries) {
    detail::header(out, name, bytes.size());
    out += bytes;
    out.append((512 - bytes.size() % 512) % 512, '\0');
  }
  out.append(1024, '\0');
  return out;
}

inline Entries unpack(const std::string& data, const std::string& origin = "archive") {
  Entries out;
  std::size_t pos = 0;
  while (pos + 512 <= data.size()) {
    const char* h = data.data() + pos;
    bool zero = true;
    for (int i = 0; i < 512; ++i) zero &= h[i] == 0;
    if (zero) return out;
    unsigned stored = static_cast<unsigned>(detail::get_octal(h + 148, 8));
    unsigned sum = 0;
    for (int i = 0; i < 512; ++i) sum += (i >= 148 && i < 156) ? ' ' : static_cast<unsigned char>(h[i]);
    if (sum != stored) throw IoError(origin + ": corrupt archive header at offset " + std::to_string(pos));
    std::string name(h, strnlen(h, 100));
    std::string prefix(h + 345, strnlen(h + 345, 155));
    if (!prefix.empty()) name = prefix + "/" + name;
    std::size_t size = detail::get_octal(h + 124, 12);
    pos += 512;
    if (pos + size > data.size()) throw IoError(origin + ": truncated archive member " + name);
    if (h[156] == '0' || h[156] == '\0') out.emplace_back(name, data.substr(pos, size));
    pos += (size + 511) / 512 * 512;
  }
  throw IoError(origin + ": archive has no end marker");
}

/// Writes via a temporary file and rename so readers never see a partial file.
inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write(const fs::path& path, const Entries& entries) { write_file_atomic(path, pack(entries)); }

inline std::map<std::string, std::string> read(const fs::path& path) {
  std::map<std::string, std::string> m;
  for (auto& [k, v] : unpack(read_file(path), path.string())) m[k] = std::move(v);
  return m;
}

}  // namespace synthfeat::tar
