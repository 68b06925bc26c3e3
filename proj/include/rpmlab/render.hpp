// render.hpp -- rasterizes symbolic panels into grayscale bitmaps.
//
// Panels are square, background 0, one centered filled glyph whose outline
// encodes shape, circumradius encodes size, and fill intensity encodes shade.
// Every one of the 60 symbolic cells renders to a distinct bitmap at the
// supported panel sizes (the tests enforce this exhaustively).
#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "rpmlab/symbolic.hpp"

namespace rpmlab {

// Fill intensity per shade level.
inline constexpr uint8_t kShadeLevel[4] = {90, 145, 200, 255};
// Circumradius per size level, as a fraction of half the panel height.
inline constexpr double kSizeRadius[3] = {0.40, 0.62, 0.85};

// Writes h*h bytes, row-major.
void render_cell(const SymbolicCell& cell, int h, uint8_t* out);

// Memoizes the 60 possible bitmaps per panel size.
class RenderCache {
 public:
  const std::vector<uint8_t>& bitmap(const SymbolicCell& cell, int h);

 private:
  std::map<std::pair<int, int>, std::vector<uint8_t>> cache_;  // (h, cell key)
};

inline int cell_key(const SymbolicCell& c) { return c.shape * 12 + c.size * 4 + c.shade; }

}  // namespace rpmlab
