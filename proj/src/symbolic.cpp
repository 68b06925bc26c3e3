#include "rpmlab/symbolic.hpp"

#include <algorithm>

#include "rpmlab/errors.hpp"

namespace rpmlab {

Mode mode_from_string(const std::string& s) {
  if (s == "raven_like") return Mode::raven_like;
  if (s == "pgm_like") return Mode::pgm_like;
  throw ConfigError("unknown mode: " + s);
}

Rule rule_from_string(const std::string& s) {
  if (s == "constant") return Rule::constant;
  if (s == "progress_plus") return Rule::progress_plus;
  if (s == "progress_minus") return Rule::progress_minus;
  if (s == "distribute3") return Rule::distribute3;
  throw ConfigError("unknown rule: " + s);
}

const char* mode_name(Mode m) {
  return m == Mode::raven_like ? "raven_like" : "pgm_like";
}

const char* rule_name(Rule r) {
  switch (r) {
    case Rule::constant: return "constant";
    case Rule::progress_plus: return "progress_plus";
    case Rule::progress_minus: return "progress_minus";
    case Rule::distribute3: return "distribute3";
  }
  return "?";
}

const char* attr_name(Attr a) {
  switch (a) {
    case Attr::shape: return "shape";
    case Attr::size: return "size";
    case Attr::shade: return "shade";
  }
  return "?";
}

namespace {

// v[r][c] for one attribute
std::array<std::array<int, 3>, 3> attr_grid(const Grid& g, Attr a) {
  std::array<std::array<int, 3>, 3> v{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) v[r][c] = g[static_cast<size_t>(r * 3 + c)].get(a);
  return v;
}

bool rows_constant(const std::array<std::array<int, 3>, 3>& v) {
  for (int r = 0; r < 3; ++r)
    if (v[r][0] != v[r][1] || v[r][1] != v[r][2]) return false;
  return true;
}

bool cols_constant(const std::array<std::array<int, 3>, 3>& v) {
  for (int c = 0; c < 3; ++c)
    if (v[0][c] != v[1][c] || v[1][c] != v[2][c]) return false;
  return true;
}

bool rows_step(const std::array<std::array<int, 3>, 3>& v, int step) {
  for (int r = 0; r < 3; ++r)
    if (v[r][1] != v[r][0] + step || v[r][2] != v[r][1] + step) return false;
  return true;
}

bool cols_step(const std::array<std::array<int, 3>, 3>& v, int step) {
  for (int c = 0; c < 3; ++c)
    if (v[1][c] != v[0][c] + step || v[2][c] != v[1][c] + step) return false;
  return true;
}

// Each row is a permutation of the same 3-element set.
bool rows_distribute(const std::array<std::array<int, 3>, 3>& v) {
  std::array<int, 3> base = {v[0][0], v[0][1], v[0][2]};
  std::sort(base.begin(), base.end());
  if (base[0] == base[1] || base[1] == base[2]) return false;
  for (int r = 1; r < 3; ++r) {
    std::array<int, 3> row = {v[r][0], v[r][1], v[r][2]};
    std::sort(row.begin(), row.end());
    if (row != base) return false;
  }
  return true;
}

bool cols_distribute(const std::array<std::array<int, 3>, 3>& v) {
  std::array<int, 3> base = {v[0][0], v[0][1], v[0][2]};
  std::sort(base.begin(), base.end());
  for (int c = 0; c < 3; ++c) {
    std::array<int, 3> col = {v[0][c], v[1][c], v[2][c]};
    std::sort(col.begin(), col.end());
    if (col != base) return false;
  }
  return true;
}

}  // namespace

bool check_rule(const Grid& grid, const RuleSpec& spec) {
  auto v = attr_grid(grid, spec.attr);
  bool both = spec.axis == Axis::row_and_column;
  switch (spec.rule) {
    case Rule::constant:
      return rows_constant(v) && (!both || cols_constant(v));
    case Rule::progress_plus:
      return rows_step(v, 1) && (!both || cols_step(v, 1));
    case Rule::progress_minus:
      return rows_step(v, -1) && (!both || cols_step(v, -1));
    case Rule::distribute3:
      return rows_distribute(v) && (!both || cols_distribute(v));
  }
  return false;
}

int count_satisfying_options(const Grid& context_grid, const std::vector<RuleSpec>& rules,
                             const std::array<SymbolicCell, 8>& options) {
  int hits = 0;
  Grid g = context_grid;
  for (const SymbolicCell& o : options) {
    g[8] = o;
    bool ok = true;
    for (const RuleSpec& r : rules) ok = ok && check_rule(g, r);
    hits += ok ? 1 : 0;
  }
  return hits;
}

int directive_index(const RuleSpec& spec) {
  bool const_or_d3 = spec.rule == Rule::constant || spec.rule == Rule::distribute3;
  switch (spec.attr) {
    case Attr::shape:
      return static_cast<int>(spec.rule);  // constant, plus, minus, distribute
    case Attr::size:
      if (const_or_d3) return spec.rule == Rule::constant ? 4 : 5;
      break;
    case Attr::shade:
      if (const_or_d3) return spec.rule == Rule::constant ? 6 : 7;
      break;
  }
  throw ConfigError("directive_index: attribute/rule pair outside the directive table");
}

}  // namespace rpmlab
