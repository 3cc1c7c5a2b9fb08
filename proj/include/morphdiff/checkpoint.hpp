#pragma once

// DFCK checkpoint: magic, version, a key = value header, then named DFTN
// tensors in the order they were added.
//
//   "DFCK" | u32 version | u32 header bytes | header text
//   u32 tensor count | (u32 name bytes | name | DFTN blob)*

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "morphdiff/io.hpp"
#include "morphdiff/nn.hpp"

namespace morphdiff {

inline constexpr std::array<char, 4> kCheckpointMagic{'D', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  KeyValues header;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const std::string& get(const std::string& key) const {
    for (const auto& [k, v] : header) {
      if (k == key) return v;
    }
    throw IoError("checkpoint header has no key '" + key + "'");
  }

  bool has(const std::string& key) const {
    for (const auto& [k, v] : header) {
      if (k == key) return true;
    }
    return false;
  }

  std::map<std::string, Tensor<float>> tensor_map() const { return {tensors.begin(), tensors.end()}; }

  template <class S>
  void add(const NamedParams<S>& params) {
    for (const auto& [name, p] : params) {
      std::vector<float> v(p.data().begin(), p.data().end());
      tensors.emplace_back(name, Tensor<float>(p.shape(), std::move(v)));
    }
  }
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os.write(kCheckpointMagic.data(), 4);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  const std::string header = format_key_values(ck.header);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_dftn(os, t);
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kCheckpointMagic) throw IoError("not a checkpoint (bad magic)");
  const auto version = detail::read_le<std::uint32_t>(is, "checkpoint version");
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  auto read_string = [&](const char* what) {
    const auto n = detail::read_le<std::uint32_t>(is, what);
    std::string s(n, '\0');
    if (!is.read(s.data(), n)) throw IoError(std::string("truncated ") + what);
    return s;
  };
  Checkpoint ck;
  const std::string header = read_string("checkpoint header");
  // Keep the header in file order so a reload writes identical bytes.
  std::istringstream hs(header);
  for (std::string line; std::getline(hs, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("malformed checkpoint header line: " + line);
    ck.header.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  const auto count = detail::read_le<std::uint32_t>(is, "checkpoint tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = read_string("tensor name");
    ck.tensors.emplace_back(std::move(name), read_dftn(is));
  }
  return ck;
}

// Written to a sibling temp file and renamed, so a crash never leaves a torn checkpoint.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    write_checkpoint(os, ck);
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  try {
    return read_checkpoint(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// Copies stored values into the parameters; names and shapes must match exactly.
template <class S>
void load_parameters(const std::map<std::string, Tensor<float>>& stored, NamedParams<S>& params) {
  for (auto& [name, p] : params) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw ShapeError("checkpoint has no tensor '" + name + "'");
    if (it->second.shape() != p.shape()) {
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_string(it->second.shape()) + ", model expects " +
                       shape_string(p.shape()));
    }
    auto dst = p.mutable_data();
    const auto src = it->second.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<S>(src[i]);
  }
}

}  // namespace morphdiff
