#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "parabart/tensor.hpp"

namespace parabart {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw IoError("PBT1: truncated archive at byte " + std::to_string(pos));
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += sizeof(U);
  return value;
}

}  // namespace detail

/// Serializes tensors into the PBT1 layout:
///   "PBT1" u32 count, then per tensor: u16 name length, name bytes,
///   u8 rank, u32 dims[rank], f32 payload (all little-endian).
inline std::string encode_pbt1(const std::vector<NamedTensor>& tensors) {
  std::string out = "PBT1";
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw IoError("PBT1: tensor name too long: " + name.substr(0, 32));
    if (t.rank() > 0xFF) throw IoError("PBT1: rank too large for " + name);
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline std::vector<NamedTensor> decode_pbt1(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "PBT1") != 0) throw IoError("PBT1: bad magic");
  std::size_t pos = 4;
  const auto count = detail::get_le<std::uint32_t>(bytes, pos);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get_le<std::uint16_t>(bytes, pos);
    if (pos + len > bytes.size()) throw IoError("PBT1: truncated name");
    std::string name = bytes.substr(pos, len);
    pos += len;
    const auto rank = detail::get_le<std::uint8_t>(bytes, pos);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_le<std::uint32_t>(bytes, pos);
    std::vector<float> data(shape_numel(shape));
    for (auto& v : data) v = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, pos));
    out.push_back({std::move(name), Tensor::from_data(std::move(shape), std::move(data))});
  }
  if (pos != bytes.size()) throw IoError("PBT1: trailing bytes after last tensor");
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

inline void save_pbt1(const std::string& path, const std::vector<NamedTensor>& tensors) {
  write_file(path, encode_pbt1(tensors));
}

inline std::vector<NamedTensor> load_pbt1(const std::string& path) { return decode_pbt1(read_file(path)); }

/// 64-bit FNV-1a, hex encoded. Used for checkpoint and input fingerprints.
inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 0xF];
  return out;
}

}  // namespace parabart
