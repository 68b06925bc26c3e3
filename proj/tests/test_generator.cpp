// Generator, renderer, rule-check, and container tests. The rule semantics
// are re-implemented here from scratch so the production checker and the
// generator are validated against an independent oracle.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "rpmlab/dataset.hpp"
#include "rpmlab/errors.hpp"
#include "rpmlab/generator.hpp"
#include "rpmlab/render.hpp"
#include "rpmlab/rng.hpp"
#include "rpmlab/symbolic.hpp"

using namespace rpmlab;

namespace {

// ----- independent rule oracle ---------------------------------------------

bool oracle_line(const std::array<int, 3>& v, Rule rule, const std::set<int>& d3set) {
  switch (rule) {
    case Rule::constant: return v[0] == v[1] && v[1] == v[2];
    case Rule::progress_plus: return v[1] == v[0] + 1 && v[2] == v[1] + 1;
    case Rule::progress_minus: return v[1] == v[0] - 1 && v[2] == v[1] - 1;
    case Rule::distribute3: return std::set<int>{v[0], v[1], v[2]} == d3set && d3set.size() == 3;
  }
  return false;
}

bool oracle_check(const Grid& g, const RuleSpec& spec) {
  std::set<int> d3set;
  for (int c = 0; c < 3; ++c) d3set.insert(g[static_cast<size_t>(c)].get(spec.attr));
  for (int r = 0; r < 3; ++r) {
    std::array<int, 3> row = {g[static_cast<size_t>(r * 3)].get(spec.attr),
                              g[static_cast<size_t>(r * 3 + 1)].get(spec.attr),
                              g[static_cast<size_t>(r * 3 + 2)].get(spec.attr)};
    if (!oracle_line(row, spec.rule, d3set)) return false;
  }
  if (spec.axis == Axis::row_and_column) {
    for (int c = 0; c < 3; ++c) {
      std::array<int, 3> col = {g[static_cast<size_t>(c)].get(spec.attr),
                                g[static_cast<size_t>(3 + c)].get(spec.attr),
                                g[static_cast<size_t>(6 + c)].get(spec.attr)};
      if (!oracle_line(col, spec.rule, d3set)) return false;
    }
  }
  return true;
}

int oracle_unique_count(const Instance& inst) {
  int hits = 0;
  Grid g = inst.grid;
  for (const SymbolicCell& o : inst.options) {
    g[8] = o;
    bool ok = true;
    for (const RuleSpec& r : inst.rules) ok = ok && oracle_check(g, r);
    hits += ok ? 1 : 0;
  }
  return hits;
}

int attr_diff_count(const SymbolicCell& a, const SymbolicCell& b) {
  return (a.shape != b.shape) + (a.size != b.size) + (a.shade != b.shade);
}

bool differs_in_some(const SymbolicCell& a, const SymbolicCell& b, const std::vector<Attr>& as) {
  for (Attr at : as)
    if (a.get(at) != b.get(at)) return true;
  return false;
}

Grid make_grid(const std::array<std::array<uint8_t, 3>, 9>& vals) {
  Grid g;
  for (int i = 0; i < 9; ++i)
    g[static_cast<size_t>(i)] = {vals[static_cast<size_t>(i)][0], vals[static_cast<size_t>(i)][1],
                                 vals[static_cast<size_t>(i)][2]};
  return g;
}

}  // namespace

// ----- rng -------------------------------------------------------------------

TEST_CASE("rng streams are deterministic and bounded") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(7);
  for (int i = 0; i < 1000; ++i) {
    double d = c.next_double();
    CHECK(d >= 0.0);
    CHECK(d < 1.0);
    CHECK(c.uniform_int(13) < 13);
  }
  CHECK(Rng::mix(1, 2) == Rng::mix(1, 2));
  CHECK(Rng::mix(1, 2) != Rng::mix(2, 1));
}

// ----- renderer ---------------------------------------------------------------

TEST_CASE("all 60 symbolic cells render distinctly at both panel sizes") {
  for (int h : {20, 32}) {
    std::vector<std::vector<uint8_t>> bitmaps;
    for (int sh = 0; sh < 5; ++sh)
      for (int sz = 0; sz < 3; ++sz)
        for (int sd = 0; sd < 4; ++sd) {
          SymbolicCell c{static_cast<uint8_t>(sh), static_cast<uint8_t>(sz),
                         static_cast<uint8_t>(sd)};
          std::vector<uint8_t> bmp(static_cast<size_t>(h) * static_cast<size_t>(h));
          render_cell(c, h, bmp.data());
          bitmaps.push_back(std::move(bmp));
        }
    int collisions = 0;
    for (size_t i = 0; i < bitmaps.size(); ++i)
      for (size_t j = i + 1; j < bitmaps.size(); ++j)
        if (bitmaps[i] == bitmaps[j]) ++collisions;
    INFO("panel size " << h);
    CHECK(collisions == 0);
  }
}

TEST_CASE("shade controls mean intensity monotonically") {
  for (int sh = 0; sh < 5; ++sh)
    for (int sz = 0; sz < 3; ++sz) {
      double prev = -1;
      for (int sd = 0; sd < 4; ++sd) {
        SymbolicCell c{static_cast<uint8_t>(sh), static_cast<uint8_t>(sz),
                       static_cast<uint8_t>(sd)};
        std::vector<uint8_t> bmp(32 * 32);
        render_cell(c, 32, bmp.data());
        double mean = 0;
        for (uint8_t p : bmp) mean += p;
        mean /= bmp.size();
        CHECK(mean > prev);
        prev = mean;
      }
    }
}

TEST_CASE("size controls glyph area monotonically") {
  for (int sh = 0; sh < 5; ++sh)
    for (int sd = 0; sd < 4; ++sd) {
      int prev = -1;
      for (int sz = 0; sz < 3; ++sz) {
        SymbolicCell c{static_cast<uint8_t>(sh), static_cast<uint8_t>(sz),
                       static_cast<uint8_t>(sd)};
        std::vector<uint8_t> bmp(32 * 32);
        render_cell(c, 32, bmp.data());
        int area = 0;
        for (uint8_t p : bmp) area += p > 0;
        CHECK(area > prev);
        prev = area;
      }
    }
}

TEST_CASE("render cache matches direct rendering") {
  RenderCache cache;
  SymbolicCell c{2, 1, 3};
  std::vector<uint8_t> direct(32 * 32);
  render_cell(c, 32, direct.data());
  CHECK(cache.bitmap(c, 32) == direct);
  CHECK(cache.bitmap(c, 32) == direct);  // cached second call
}

// ----- rule checker against hand-built grids ----------------------------------

TEST_CASE("rule checker positive and negative cases") {
  // shapes constant per row, sizes ascending, shades a 3-set {0,1,3}
  Grid g = make_grid({{{2, 0, 0}, {2, 1, 1}, {2, 2, 3},
                       {4, 0, 1}, {4, 1, 3}, {4, 2, 0},
                       {1, 0, 3}, {1, 1, 0}, {1, 2, 1}}});
  CHECK(check_rule(g, {Attr::shape, Rule::constant, Axis::row}));
  CHECK(check_rule(g, {Attr::size, Rule::progress_plus, Axis::row}));
  CHECK(check_rule(g, {Attr::shade, Rule::distribute3, Axis::row}));
  CHECK_FALSE(check_rule(g, {Attr::shape, Rule::constant, Axis::row_and_column}));
  CHECK_FALSE(check_rule(g, {Attr::size, Rule::progress_minus, Axis::row}));
  CHECK_FALSE(check_rule(g, {Attr::shape, Rule::distribute3, Axis::row}));

  // both-axes progression on shape, constant shade everywhere
  Grid g2 = make_grid({{{0, 0, 2}, {1, 0, 2}, {2, 0, 2},
                        {1, 1, 2}, {2, 1, 2}, {3, 1, 2},
                        {2, 2, 2}, {3, 2, 2}, {4, 2, 2}}});
  CHECK(check_rule(g2, {Attr::shape, Rule::progress_plus, Axis::row_and_column}));
  CHECK(check_rule(g2, {Attr::shade, Rule::constant, Axis::row_and_column}));
  CHECK(check_rule(g2, {Attr::size, Rule::constant, Axis::row}));
  CHECK_FALSE(check_rule(g2, {Attr::size, Rule::constant, Axis::row_and_column}));

  // Latin square on sizes {0,1,2}
  Grid g3 = make_grid({{{0, 0, 0}, {0, 1, 0}, {0, 2, 0},
                        {0, 2, 0}, {0, 0, 0}, {0, 1, 0},
                        {0, 1, 0}, {0, 2, 0}, {0, 0, 0}}});
  CHECK(check_rule(g3, {Attr::size, Rule::distribute3, Axis::row_and_column}));
  // breaking one cell breaks the column property
  Grid g4 = g3;
  g4[4].set(Attr::size, 2);
  CHECK_FALSE(check_rule(g4, {Attr::size, Rule::distribute3, Axis::row_and_column}));
}

// ----- generated instances -----------------------------------------------------

TEST_CASE("raven instances satisfy their rules with a unique completion") {
  GenConfig cfg;
  cfg.mode = Mode::raven_like;
  cfg.seed = 11;
  cfg.img_h = 20;
  RenderCache cache;
  for (uint64_t i = 0; i < 300; ++i) {
    Instance inst = generate_instance(cfg, i, cache);
    REQUIRE(inst.rules.size() == 3);
    std::set<Attr> attrs;
    for (const RuleSpec& r : inst.rules) {
      attrs.insert(r.attr);
      CHECK(r.axis == Axis::row);
      CHECK(oracle_check(inst.grid, r));
    }
    CHECK(attrs.size() == 3);
    CHECK(inst.options[inst.answer] == inst.grid[8]);
    CHECK(oracle_unique_count(inst) == 1);
    std::set<int> keys;
    for (const SymbolicCell& o : inst.options) keys.insert(cell_key(o));
    CHECK(keys.size() == 8);  // options pairwise distinct
    CHECK(inst.pixels.size() == 16u * 20u * 20u);
  }
}

TEST_CASE("pgm instances rule two attributes on both axes") {
  GenConfig cfg;
  cfg.mode = Mode::pgm_like;
  cfg.seed = 13;
  cfg.img_h = 20;
  RenderCache cache;
  for (uint64_t i = 0; i < 300; ++i) {
    Instance inst = generate_instance(cfg, i, cache);
    REQUIRE(inst.rules.size() == 2);
    CHECK(inst.rules[0].attr != inst.rules[1].attr);
    std::vector<Attr> ruled;
    for (const RuleSpec& r : inst.rules) {
      ruled.push_back(r.attr);
      CHECK(r.axis == Axis::row_and_column);
      CHECK(oracle_check(inst.grid, r));
      CHECK(directive_index(r) >= 0);
      CHECK(directive_index(r) < kDirectiveCount);
    }
    CHECK(oracle_unique_count(inst) == 1);
    for (int o = 0; o < 8; ++o) {
      if (o == inst.answer) continue;
      // a distractor touching only the free attribute would be a second answer
      CHECK(differs_in_some(inst.options[static_cast<size_t>(o)], inst.grid[8], ruled));
    }
  }
}

TEST_CASE("impoverished distractors change exactly one attribute in the raven regime") {
  GenConfig cfg;
  cfg.mode = Mode::raven_like;
  cfg.seed = 17;
  cfg.img_h = 20;
  cfg.impoverish = true;
  RenderCache cache;
  for (uint64_t i = 0; i < 200; ++i) {
    Instance inst = generate_instance(cfg, i, cache);
    for (int o = 0; o < 8; ++o) {
      if (o == inst.answer) continue;
      CHECK(attr_diff_count(inst.options[static_cast<size_t>(o)], inst.grid[8]) == 1);
    }
  }
}

TEST_CASE("impoverished pgm distractors stay within the ruled attributes") {
  GenConfig cfg;
  cfg.mode = Mode::pgm_like;
  cfg.seed = 19;
  cfg.img_h = 20;
  cfg.impoverish = true;
  RenderCache cache;
  for (uint64_t i = 0; i < 200; ++i) {
    Instance inst = generate_instance(cfg, i, cache);
    std::vector<Attr> ruled = {inst.rules[0].attr, inst.rules[1].attr};
    for (int o = 0; o < 8; ++o) {
      if (o == inst.answer) continue;
      const SymbolicCell& d = inst.options[static_cast<size_t>(o)];
      int diffs = attr_diff_count(d, inst.grid[8]);
      // the single-change pool can run short of 7; the overflow uses two changes
      CHECK(diffs >= 1);
      CHECK(diffs <= 2);
      for (Attr a : {Attr::shape, Attr::size, Attr::shade})
        if (d.get(a) != inst.grid[8].get(a))
          CHECK(std::find(ruled.begin(), ruled.end(), a) != ruled.end());
    }
  }
}

TEST_CASE("standard distractors differ in one to three attributes") {
  GenConfig cfg;
  cfg.mode = Mode::raven_like;
  cfg.seed = 23;
  cfg.img_h = 20;
  RenderCache cache;
  bool saw_multi = false;
  for (uint64_t i = 0; i < 200; ++i) {
    Instance inst = generate_instance(cfg, i, cache);
    for (int o = 0; o < 8; ++o) {
      if (o == inst.answer) continue;
      int d = attr_diff_count(inst.options[static_cast<size_t>(o)], inst.grid[8]);
      CHECK(d >= 1);
      CHECK(d <= 3);
      saw_multi = saw_multi || d > 1;
    }
  }
  CHECK(saw_multi);
}

TEST_CASE("instance streams are reproducible per index and differ across seeds") {
  GenConfig cfg;
  cfg.mode = Mode::pgm_like;
  cfg.seed = 29;
  cfg.img_h = 20;
  RenderCache c1, c2;
  for (uint64_t i : {0ull, 5ull, 99ull}) {
    Instance a = generate_instance(cfg, i, c1);
    Instance b = generate_instance(cfg, i, c2);
    CHECK(a.answer == b.answer);
    CHECK(a.grid == b.grid);
    CHECK(a.options == b.options);
    CHECK(a.pixels == b.pixels);
    CHECK(a.rules.size() == b.rules.size());
  }
  GenConfig other = cfg;
  other.seed = 30;
  int same = 0;
  for (uint64_t i = 0; i < 50; ++i)
    same += generate_instance(cfg, i, c1).grid == generate_instance(other, i, c2).grid;
  CHECK(same < 50);
}

TEST_CASE("rule restrictions are honored and impossible configs throw") {
  GenConfig cfg;
  cfg.mode = Mode::raven_like;
  cfg.seed = 31;
  cfg.img_h = 20;
  cfg.allowed_rules = {Rule::constant, Rule::progress_plus};
  RenderCache cache;
  for (uint64_t i = 0; i < 100; ++i) {
    Instance inst = generate_instance(cfg, i, cache);
    for (const RuleSpec& r : inst.rules) {
      CHECK(r.rule != Rule::progress_minus);
      CHECK(r.rule != Rule::distribute3);
    }
  }
  GenConfig bad;
  bad.mode = Mode::pgm_like;
  bad.seed = 1;
  bad.allowed_rules = {Rule::progress_plus};  // only one attribute supports it
  CHECK_THROWS_AS(generate_instance(bad, 0, cache), UnsatisfiableRules);
}

TEST_CASE("answer slots cover all positions roughly uniformly") {
  GenConfig cfg;
  cfg.mode = Mode::raven_like;
  cfg.seed = 37;
  cfg.img_h = 20;
  RenderCache cache;
  std::array<int, 8> counts{};
  for (uint64_t i = 0; i < 800; ++i)
    counts[generate_instance(cfg, i, cache).answer]++;
  for (int c : counts) {
    CHECK(c > 55);   // expected 100, binomial sd ~9.4
    CHECK(c < 145);
  }
}

// ----- container ----------------------------------------------------------------

TEST_CASE("container round trip preserves every serialized field") {
  GenConfig cfg;
  cfg.mode = Mode::pgm_like;
  cfg.seed = 41;
  cfg.img_h = 20;
  std::vector<Instance> data = generate_dataset(cfg, 25);
  std::stringstream buf;
  write_rpmb(buf, data);
  std::string first = buf.str();
  std::vector<Instance> back = read_rpmb(buf);
  REQUIRE(back.size() == data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    CHECK(back[i].answer == data[i].answer);
    CHECK(back[i].mode == data[i].mode);
    CHECK(back[i].rules == data[i].rules);
    CHECK(back[i].grid == data[i].grid);
    CHECK(back[i].h == data[i].h);
    CHECK(back[i].w == data[i].w);
    CHECK(back[i].pixels == data[i].pixels);
  }
  // a second serialization of the decoded data is byte-identical
  std::stringstream buf2;
  write_rpmb(buf2, back);
  CHECK(buf2.str() == first);
}

TEST_CASE("container file io round trips") {
  GenConfig cfg;
  cfg.mode = Mode::raven_like;
  cfg.seed = 43;
  cfg.img_h = 20;
  std::vector<Instance> data = generate_dataset(cfg, 5);
  const char* path = "tmp_roundtrip.rpmb";
  write_rpmb(path, data);
  std::vector<Instance> back = read_rpmb(std::string(path));
  CHECK(back.size() == 5);
  CHECK(back[3].pixels == data[3].pixels);
  std::remove(path);
}

TEST_CASE("container rejects malformed input") {
  GenConfig cfg;
  cfg.mode = Mode::raven_like;
  cfg.seed = 47;
  cfg.img_h = 20;
  std::vector<Instance> data = generate_dataset(cfg, 2);
  std::stringstream buf;
  write_rpmb(buf, data);
  std::string bytes = buf.str();

  {
    std::string bad = bytes;
    bad[0] = 'X';
    std::stringstream s(bad);
    CHECK_THROWS_AS(read_rpmb(s), FormatError);
  }
  {
    std::string bad = bytes;
    bad[4] = 9;  // version
    std::stringstream s(bad);
    CHECK_THROWS_AS(read_rpmb(s), FormatError);
  }
  {
    std::string bad = bytes.substr(0, bytes.size() / 2);
    std::stringstream s(bad);
    CHECK_THROWS_AS(read_rpmb(s), TruncationError);
  }
  {
    std::string bad = bytes;
    bad[13] = 42;  // first instance's answer slot
    std::stringstream s(bad);
    CHECK_THROWS_AS(read_rpmb(s), FormatError);
  }
  {
    std::stringstream s("");
    CHECK_THROWS_AS(read_rpmb(s), TruncationError);
  }
}
