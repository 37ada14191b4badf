// Checkpoint archive:
//   8-byte magic "LSIRRCK1" | u64 LE header length | JSON header | array data
// The header lists every array as {name, shape, offset} with offsets in bytes
// from the start of the data section; data is little-endian float32.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsirr/errors.hpp"
#include "lsirr/tensor.hpp"

namespace lsirr::checkpoint {

namespace fs = std::filesystem;

inline constexpr char kMagic[8] = {'L', 'S', 'I', 'R', 'R', 'C', 'K', '1'};

struct Archive {
  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, Tensor<float>> arrays;
};

namespace detail {

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big)
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  return v;
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace detail

// 64-bit FNV-1a, hex encoded.
inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string serialize(const Archive& a) {
  nlohmann::json header = a.header;
  auto& index = header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : a.arrays) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * 4;
  }
  const std::string text = header.dump();
  std::string out(kMagic, kMagic + 8);
  detail::put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& [_, t] : a.arrays)
    for (float v : t.vec()) {
      const std::uint32_t bits = detail::to_le(std::bit_cast<std::uint32_t>(v));
      char b[4];
      std::memcpy(b, &bits, 4);
      out.append(b, 4);
    }
  return out;
}

inline Archive deserialize(const std::string& bytes, const std::string& origin = "checkpoint") {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw DataError(origin + " is not a checkpoint archive");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t hlen = detail::get_u64(raw + 8);
  if (hlen > bytes.size() - 16) throw DataError(origin + ": truncated header");
  Archive a;
  try {
    a.header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": malformed header: " + e.what());
  }
  const std::size_t base = 16 + hlen;
  for (const auto& entry : a.header.at("arrays")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_size(shape);
    if (base + offset + n * 4 > bytes.size()) throw DataError(origin + ": truncated array " + name);
    Tensor<float> t(shape);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, bytes.data() + base + offset + 4 * i, 4);
      t[i] = std::bit_cast<float>(detail::to_le(bits));
    }
    a.arrays.emplace(name, std::move(t));
  }
  a.header.erase("arrays");
  return a;
}

// Written to a sibling temporary file and renamed into place.
inline void save(const fs::path& path, const Archive& a) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    const auto bytes = serialize(a);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline Archive load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes, path.string());
}

// Arrays whose names start with `prefix`, with the prefix removed.
inline std::map<std::string, Tensor<float>> with_prefix(const Archive& a, const std::string& prefix) {
  std::map<std::string, Tensor<float>> out;
  for (const auto& [name, t] : a.arrays)
    if (name.rfind(prefix, 0) == 0) out.emplace(name.substr(prefix.size()), t);
  return out;
}

}  // namespace lsirr::checkpoint
