#include "rpmlab/dataset.hpp"

#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>

#include "rpmlab/errors.hpp"

namespace rpmlab {

namespace {

constexpr char kMagic[4] = {'R', 'P', 'M', 'B'};
constexpr uint8_t kVersion = 1;

void put_u8(std::ostream& os, uint8_t v) { os.put(static_cast<char>(v)); }

void put_u16(std::ostream& os, uint16_t v) {
  os.put(static_cast<char>(v & 0xff));
  os.put(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::ostream& os, uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint8_t get_u8(std::istream& is) {
  int c = is.get();
  if (c == EOF) throw TruncationError("file ends mid-record");
  return static_cast<uint8_t>(c);
}

uint16_t get_u16(std::istream& is) {
  uint16_t lo = get_u8(is), hi = get_u8(is);
  return static_cast<uint16_t>(lo | (hi << 8));
}

uint32_t get_u32(std::istream& is) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(get_u8(is)) << (8 * i);
  return v;
}

uint8_t checked(uint8_t v, uint8_t max_inclusive, const char* what) {
  if (v > max_inclusive) throw FormatError(std::string("field out of range: ") + what);
  return v;
}

void validate_cell(const SymbolicCell& c) {
  if (c.shape >= 5 || c.size >= 3 || c.shade >= 4)
    throw FormatError("symbolic cell out of range");
}

}  // namespace

void write_rpmb(std::ostream& os, const std::vector<Instance>& data) {
  if (data.size() > 0xffffffffull) throw FormatError("too many instances for the container");
  int h = data.empty() ? 0 : data[0].h;
  int w = data.empty() ? 0 : data[0].w;
  os.write(kMagic, 4);
  put_u8(os, kVersion);
  put_u32(os, static_cast<uint32_t>(data.size()));
  put_u16(os, static_cast<uint16_t>(h));
  put_u16(os, static_cast<uint16_t>(w));
  for (const Instance& inst : data) {
    if (inst.h != h || inst.w != w) throw FormatError("mixed panel sizes in one container");
    if (inst.pixels.size() != 16 * static_cast<size_t>(h) * static_cast<size_t>(w))
      throw FormatError("pixel payload does not match the panel size");
    if (inst.rules.size() > 255) throw FormatError("too many rules in one instance");
    put_u8(os, checked(inst.answer, 7, "answer"));
    put_u8(os, checked(static_cast<uint8_t>(inst.mode), 1, "mode"));
    put_u8(os, static_cast<uint8_t>(inst.rules.size()));
    for (const RuleSpec& r : inst.rules) {
      put_u8(os, checked(static_cast<uint8_t>(r.attr), 2, "attribute"));
      put_u8(os, checked(static_cast<uint8_t>(r.rule), 3, "rule"));
      put_u8(os, checked(static_cast<uint8_t>(r.axis), 1, "axis"));
    }
    for (const SymbolicCell& c : inst.grid) {
      validate_cell(c);
      put_u8(os, c.shape);
      put_u8(os, c.size);
      put_u8(os, c.shade);
    }
    os.write(reinterpret_cast<const char*>(inst.pixels.data()),
             static_cast<std::streamsize>(inst.pixels.size()));
  }
  if (!os) throw FormatError("write failed");
}

void write_rpmb(const std::string& path, const std::vector<Instance>& data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open for writing: " + path);
  write_rpmb(f, data);
}

std::vector<Instance> read_rpmb(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4) throw TruncationError("file too short for the header");
  if (magic[0] != 'R' || magic[1] != 'P' || magic[2] != 'M' || magic[3] != 'B')
    throw FormatError("bad magic");
  uint8_t version = get_u8(is);
  if (version != kVersion) throw FormatError("unsupported container version");
  uint32_t count = get_u32(is);
  uint16_t h = get_u16(is);
  uint16_t w = get_u16(is);
  std::vector<Instance> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    Instance inst;
    inst.h = h;
    inst.w = w;
    inst.answer = checked(get_u8(is), 7, "answer");
    inst.mode = static_cast<Mode>(checked(get_u8(is), 1, "mode"));
    uint8_t nrules = get_u8(is);
    for (uint8_t r = 0; r < nrules; ++r) {
      RuleSpec spec{};
      spec.attr = static_cast<Attr>(checked(get_u8(is), 2, "attribute"));
      spec.rule = static_cast<Rule>(checked(get_u8(is), 3, "rule"));
      spec.axis = static_cast<Axis>(checked(get_u8(is), 1, "axis"));
      inst.rules.push_back(spec);
    }
    for (SymbolicCell& c : inst.grid) {
      c.shape = get_u8(is);
      c.size = get_u8(is);
      c.shade = get_u8(is);
      validate_cell(c);
    }
    size_t payload = 16 * static_cast<size_t>(h) * static_cast<size_t>(w);
    inst.pixels.resize(payload);
    is.read(reinterpret_cast<char*>(inst.pixels.data()), static_cast<std::streamsize>(payload));
    if (static_cast<size_t>(is.gcount()) != payload)
      throw TruncationError("file ends mid-record");
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<Instance> read_rpmb(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open for reading: " + path);
  return read_rpmb(f);
}

}  // namespace rpmlab
