// checkpoint.hpp -- named-tensor container, 32-bit floats, little-endian.
//
// Layout: magic "RPCK", u8 version (1), u32 entry count; per entry
//   u16 name length, name bytes, u8 rank, rank * u32 dims, numel * f32 raw.
// Round trips are bit-exact; entry names must be unique.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "rpmlab/errors.hpp"
#include "rpmlab/tensor.hpp"

namespace rpmlab {

struct NamedTensors {
  std::vector<std::pair<std::string, Tensor<float>>> items;

  void add(const std::string& name, Tensor<float> t) {
    if (find(name) != nullptr) throw FormatError("duplicate checkpoint entry: " + name);
    items.emplace_back(name, std::move(t));
  }

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void ck_put_u32(std::ostream& os, uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void ck_put_u16(std::ostream& os, uint16_t v) {
  os.put(static_cast<char>(v & 0xff));
  os.put(static_cast<char>((v >> 8) & 0xff));
}

inline uint8_t ck_get_u8(std::istream& is) {
  int c = is.get();
  if (c == EOF) throw TruncationError("checkpoint ends mid-record");
  return static_cast<uint8_t>(c);
}

inline uint16_t ck_get_u16(std::istream& is) {
  uint16_t lo = ck_get_u8(is), hi = ck_get_u8(is);
  return static_cast<uint16_t>(lo | (hi << 8));
}

inline uint32_t ck_get_u32(std::istream& is) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(ck_get_u8(is)) << (8 * i);
  return v;
}

}  // namespace detail

inline void save_tensors(std::ostream& os, const NamedTensors& nt) {
  os.write("RPCK", 4);
  os.put(1);
  detail::ck_put_u32(os, static_cast<uint32_t>(nt.items.size()));
  for (const auto& [name, t] : nt.items) {
    if (name.size() > 0xffff) throw FormatError("checkpoint entry name too long");
    if (t.rank() > 255) throw FormatError("checkpoint entry rank too large");
    detail::ck_put_u16(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(t.rank()));
    for (int64_t d : t.shape) detail::ck_put_u32(os, static_cast<uint32_t>(d));
    for (float f : t.data) {
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::ck_put_u32(os, bits);
    }
  }
  if (!os) throw FormatError("checkpoint write failed");
}

inline void save_tensors(const std::string& path, const NamedTensors& nt) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open for writing: " + path);
  save_tensors(f, nt);
}

inline NamedTensors load_tensors(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4) throw TruncationError("checkpoint too short for the header");
  if (std::memcmp(magic, "RPCK", 4) != 0) throw FormatError("bad checkpoint magic");
  if (detail::ck_get_u8(is) != 1) throw FormatError("unsupported checkpoint version");
  uint32_t count = detail::ck_get_u32(is);
  NamedTensors nt;
  for (uint32_t e = 0; e < count; ++e) {
    uint16_t len = detail::ck_get_u16(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (is.gcount() != len) throw TruncationError("checkpoint ends mid-record");
    uint8_t rank = detail::ck_get_u8(is);
    Shape shape(rank);
    for (uint8_t d = 0; d < rank; ++d)
      shape[d] = static_cast<int64_t>(detail::ck_get_u32(is));
    Tensor<float> t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) {
      uint32_t bits = detail::ck_get_u32(is);
      std::memcpy(&t.data[static_cast<size_t>(i)], &bits, 4);
    }
    nt.add(name, std::move(t));
  }
  return nt;
}

inline NamedTensors load_tensors(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open for reading: " + path);
  return load_tensors(f);
}

}  // namespace rpmlab
