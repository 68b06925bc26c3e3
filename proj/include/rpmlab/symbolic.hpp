// symbolic.hpp -- attribute grids and row/column rules for 3x3 matrix puzzles.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace rpmlab {

enum class Attr : uint8_t { shape = 0, size = 1, shade = 2 };
enum class Rule : uint8_t { constant = 0, progress_plus = 1, progress_minus = 2, distribute3 = 3 };
enum class Axis : uint8_t { row = 0, row_and_column = 1 };
enum class Mode : uint8_t { raven_like = 0, pgm_like = 1 };

Mode mode_from_string(const std::string& s);
Rule rule_from_string(const std::string& s);
const char* mode_name(Mode m);
const char* rule_name(Rule r);
const char* attr_name(Attr a);

inline int attr_range(Attr a) {
  switch (a) {
    case Attr::shape: return 5;
    case Attr::size: return 3;
    case Attr::shade: return 4;
  }
  return 0;
}

struct RuleSpec {
  Attr attr;
  Rule rule;
  Axis axis;
  bool operator==(const RuleSpec&) const = default;
};

// One panel: shape in [0,5), size in [0,3), shade in [0,4).
struct SymbolicCell {
  uint8_t shape = 0;
  uint8_t size = 0;
  uint8_t shade = 0;

  bool operator==(const SymbolicCell&) const = default;

  uint8_t get(Attr a) const {
    switch (a) {
      case Attr::shape: return shape;
      case Attr::size: return size;
      case Attr::shade: return shade;
    }
    return 0;
  }

  void set(Attr a, uint8_t v) {
    switch (a) {
      case Attr::shape: shape = v; break;
      case Attr::size: size = v; break;
      case Attr::shade: shade = v; break;
    }
  }
};

using Grid = std::array<SymbolicCell, 9>;  // row-major, cell 8 is the answer position

// True when the full grid satisfies the rule. Used both by the generator and
// as the brute-force uniqueness oracle in tests.
bool check_rule(const Grid& grid, const RuleSpec& spec);

// Number of candidate cells that complete the context (cells 0..7) under all
// rules; the generator guarantees this is 1 across the 8 offered options.
int count_satisfying_options(const Grid& context_grid, const std::vector<RuleSpec>& rules,
                             const std::array<SymbolicCell, 8>& options);

// Index of a (attribute, rule) manifestation in the fixed directive table used
// for metadata supervision; covers every pair the pgm-style generator can emit.
int directive_index(const RuleSpec& spec);
constexpr int kDirectiveCount = 8;

}  // namespace rpmlab
