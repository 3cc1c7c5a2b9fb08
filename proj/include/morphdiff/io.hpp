#pragma once

// DFTN v1 tensor files and flat `key = value` sidecars.
//
// DFTN layout: "DFTN", u32 version (1), u8 rank, rank x u32 dims, then the
// row-major f32 payload. Every integer and float is little-endian.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "morphdiff/tensor.hpp"

namespace morphdiff {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

template <class T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::array<unsigned char, sizeof(T)> b;
    std::memcpy(b.data(), &v, sizeof(T));
    std::reverse(b.begin(), b.end());
    std::memcpy(&v, b.data(), sizeof(T));
  }
  return v;
}

template <class T>
void write_le(std::ostream& os, T v) {
  v = byteswap_if_big(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_le(std::istream& is, const char* what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError(std::string("truncated stream while reading ") + what);
  return byteswap_if_big(v);
}

}  // namespace detail

inline constexpr std::array<char, 4> kDftnMagic{'D', 'F', 'T', 'N'};
inline constexpr std::uint32_t kDftnVersion = 1;

template <class S>
void write_dftn(std::ostream& os, const Tensor<S>& t) {
  if (t.rank() > 255) throw IoError("DFTN supports rank <= 255");
  os.write(kDftnMagic.data(), 4);
  detail::write_le<std::uint32_t>(os, kDftnVersion);
  detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) {
    if (d < 0 || d > std::numeric_limits<std::uint32_t>::max()) throw IoError("DFTN dimension out of range");
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  }
  for (S v : t.data()) detail::write_le<float>(os, static_cast<float>(v));
}

inline Tensor<float> read_dftn(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kDftnMagic) throw IoError("not a DFTN stream (bad magic)");
  const auto version = detail::read_le<std::uint32_t>(is, "DFTN version");
  if (version != kDftnVersion) throw IoError("unsupported DFTN version " + std::to_string(version));
  const auto rank = detail::read_le<std::uint8_t>(is, "DFTN rank");
  Shape shape(rank);
  for (auto& d : shape) d = detail::read_le<std::uint32_t>(is, "DFTN dims");
  std::vector<float> values(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : values) v = detail::read_le<float>(is, "DFTN payload");
  return Tensor<float>(std::move(shape), std::move(values));
}

template <class S>
void save_dftn(const std::filesystem::path& path, const Tensor<S>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_dftn(os, t);
  if (!os) throw IoError("failed writing " + path.string());
}

inline Tensor<float> load_dftn(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_dftn(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// ------------------------------------------------------------ key = value

// Insertion-ordered so written files are stable.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

// Blank lines and `#` comments are ignored; later keys override earlier ones.
inline std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& origin = "input") {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw IoError(origin + ":" + std::to_string(lineno) + ": expected `key = value`");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw IoError(origin + ":" + std::to_string(lineno) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

inline void save_key_values(const std::filesystem::path& path, const KeyValues& kv) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << format_key_values(kv);
  if (!os) throw IoError("failed writing " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline std::map<std::string, std::string> load_key_values(const std::filesystem::path& path) {
  return parse_key_values(read_text(path), path.string());
}

}  // namespace morphdiff
