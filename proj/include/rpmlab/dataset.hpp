// dataset.hpp -- RPMB binary container for generated puzzle instances.
//
// Little-endian layout:
//   magic "RPMB", u8 version (1), u32 instance count, u16 panel h, u16 panel w
//   per instance:
//     u8 answer slot, u8 mode, u8 rule count,
//     rule count * (u8 attribute, u8 rule, u8 axis),
//     9 * (u8 shape, u8 size, u8 shade)   full symbolic grid, row-major
//     16 * h * w bytes                    panels: context cells 0..7, then options
//
// Reading restores everything except the per-option symbolic cells (the
// panels carry them visually; the symbolic truth is only kept for the grid).
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "rpmlab/generator.hpp"

namespace rpmlab {

void write_rpmb(std::ostream& os, const std::vector<Instance>& data);
void write_rpmb(const std::string& path, const std::vector<Instance>& data);

std::vector<Instance> read_rpmb(std::istream& is);
std::vector<Instance> read_rpmb(const std::string& path);

}  // namespace rpmlab
