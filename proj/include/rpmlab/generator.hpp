// generator.hpp -- procedural 3x3 matrix-completion puzzles.
//
// Two grid regimes:
//   raven_like: one row-axis rule per attribute (all three attributes ruled).
//   pgm_like:   exactly two rules on two distinct attributes, each holding
//               along rows and columns simultaneously.
// Every instance has exactly one option satisfying all rules, and instance
// `index` under a fixed config is reproducible in isolation.
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "rpmlab/render.hpp"
#include "rpmlab/symbolic.hpp"

namespace rpmlab {

struct GenConfig {
  Mode mode = Mode::raven_like;
  uint64_t seed = 0;
  int img_h = 32;
  // Restricts which rule kinds may be sampled (applies per attribute, after
  // attribute compatibility). Empty means all four.
  std::vector<Rule> allowed_rules;
  // Distractors differ from the answer in exactly one ruled attribute when
  // set; otherwise in one to three attributes (at least one ruled).
  bool impoverish = false;
};

struct Instance {
  Mode mode = Mode::raven_like;
  uint8_t answer = 0;  // option index holding the true completion
  std::vector<RuleSpec> rules;
  Grid grid;                             // full grid; grid[8] == options[answer]
  std::array<SymbolicCell, 8> options;   // symbolic options (not serialized)
  int h = 0, w = 0;
  std::vector<uint8_t> pixels;  // 16 panels of h*w: context cells 0..7, then options
};

// Generates instance `index` of the stream defined by cfg.seed. Throws
// UnsatisfiableRules when the config admits no valid grid or option set.
Instance generate_instance(const GenConfig& cfg, uint64_t index, RenderCache& cache);

// Convenience batch form.
std::vector<Instance> generate_dataset(const GenConfig& cfg, uint64_t count);

}  // namespace rpmlab
