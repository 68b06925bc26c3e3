#include "rpmlab/render.hpp"

#include <cmath>
#include <cstring>

namespace rpmlab {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Pt {
  double x, y;
};

// Regular polygon vertices; y grows downward, so -90 degrees points up.
std::vector<Pt> polygon(int sides, double cx, double cy, double r, double start_deg) {
  std::vector<Pt> v(static_cast<size_t>(sides));
  for (int i = 0; i < sides; ++i) {
    double a = (start_deg + 360.0 * i / sides) * kPi / 180.0;
    v[static_cast<size_t>(i)] = {cx + r * std::cos(a), cy + r * std::sin(a)};
  }
  return v;
}

// Convex polygon containment by consistent edge-cross sign; boundary counts.
bool inside_polygon(const std::vector<Pt>& v, double px, double py) {
  int pos = 0, neg = 0;
  size_t n = v.size();
  for (size_t i = 0; i < n; ++i) {
    const Pt& a = v[i];
    const Pt& b = v[(i + 1) % n];
    double cross = (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x);
    if (cross > 0) ++pos;
    if (cross < 0) ++neg;
  }
  return pos == 0 || neg == 0;
}

}  // namespace

void render_cell(const SymbolicCell& cell, int h, uint8_t* out) {
  std::memset(out, 0, static_cast<size_t>(h) * static_cast<size_t>(h));
  double c = h / 2.0;
  double r = kSizeRadius[cell.size] * c;
  uint8_t fill = kShadeLevel[cell.shade];

  std::vector<Pt> poly;
  switch (cell.shape) {
    case 0: poly = polygon(3, c, c, r, -90.0); break;   // triangle, point up
    case 1: poly = polygon(4, c, c, r, 45.0); break;    // axis-aligned square
    case 2: poly = polygon(5, c, c, r, -90.0); break;   // pentagon, point up
    case 3: poly = polygon(6, c, c, r, 0.0); break;     // hexagon, vertex right
    case 4: break;                                      // circle
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < h; ++x) {
      double px = x + 0.5, py = y + 0.5;
      bool in;
      if (cell.shape == 4) {
        double dx = px - c, dy = py - c;
        in = dx * dx + dy * dy <= r * r;
      } else {
        in = inside_polygon(poly, px, py);
      }
      if (in) out[y * h + x] = fill;
    }
  }
}

const std::vector<uint8_t>& RenderCache::bitmap(const SymbolicCell& cell, int h) {
  auto key = std::make_pair(h, cell_key(cell));
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  std::vector<uint8_t> bmp(static_cast<size_t>(h) * static_cast<size_t>(h));
  render_cell(cell, h, bmp.data());
  return cache_.emplace(key, std::move(bmp)).first->second;
}

}  // namespace rpmlab
