#include "rpmlab/generator.hpp"

#include <algorithm>

#include "rpmlab/errors.hpp"
#include "rpmlab/rng.hpp"

namespace rpmlab {

namespace {

const Attr kAttrs[3] = {Attr::shape, Attr::size, Attr::shade};

template <typename T>
void shuffle_vec(std::vector<T>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[rng.uniform_int(static_cast<uint64_t>(i))]);
}

// Rule kinds an attribute supports in a mode, intersected with cfg.allowed_rules.
// Progressions along both axes sweep 5 values, so only shape supports them in
// the pgm regime; along rows alone they need a range of at least 3.
std::vector<Rule> compatible_rules(Attr a, Mode mode, const std::vector<Rule>& allowed) {
  std::vector<Rule> out;
  for (Rule r : {Rule::constant, Rule::progress_plus, Rule::progress_minus, Rule::distribute3}) {
    if (mode == Mode::pgm_like && a != Attr::shape &&
        (r == Rule::progress_plus || r == Rule::progress_minus))
      continue;
    if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), r) == allowed.end())
      continue;
    out.push_back(r);
  }
  return out;
}

std::array<int, 3> pick_three(int range, Rng& rng) {
  std::vector<int> vals(static_cast<size_t>(range));
  for (int i = 0; i < range; ++i) vals[static_cast<size_t>(i)] = i;
  shuffle_vec(vals, rng);
  return {vals[0], vals[1], vals[2]};
}

void fill_attr_rowwise(Grid& g, Attr a, Rule rule, Rng& rng) {
  int range = attr_range(a);
  for (int r = 0; r < 3; ++r) {
    std::array<int, 3> row{};
    switch (rule) {
      case Rule::constant: {
        int v = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(range)));
        row = {v, v, v};
        break;
      }
      case Rule::progress_plus: {
        int s = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(range - 2)));
        row = {s, s + 1, s + 2};
        break;
      }
      case Rule::progress_minus: {
        int s = 2 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(range - 2)));
        row = {s, s - 1, s - 2};
        break;
      }
      case Rule::distribute3:
        break;  // handled separately (needs a grid-fixed value set)
    }
    for (int c = 0; c < 3; ++c)
      g[static_cast<size_t>(r * 3 + c)].set(a, static_cast<uint8_t>(row[static_cast<size_t>(c)]));
  }
}

void fill_attr_distribute_rowwise(Grid& g, Attr a, Rng& rng) {
  auto set3 = pick_three(attr_range(a), rng);
  for (int r = 0; r < 3; ++r) {
    std::vector<int> row(set3.begin(), set3.end());
    shuffle_vec(row, rng);
    for (int c = 0; c < 3; ++c)
      g[static_cast<size_t>(r * 3 + c)].set(a, static_cast<uint8_t>(row[static_cast<size_t>(c)]));
  }
}

void fill_attr_both_axes(Grid& g, Attr a, Rule rule, Rng& rng) {
  int range = attr_range(a);
  auto put = [&](int r, int c, int v) {
    g[static_cast<size_t>(r * 3 + c)].set(a, static_cast<uint8_t>(v));
  };
  switch (rule) {
    case Rule::constant: {
      int v = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(range)));
      for (int i = 0; i < 9; ++i) g[static_cast<size_t>(i)].set(a, static_cast<uint8_t>(v));
      break;
    }
    case Rule::progress_plus:
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) put(r, c, r + c);
      break;
    case Rule::progress_minus:
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) put(r, c, (range - 1) - r - c);
      break;
    case Rule::distribute3: {
      // Latin square on a random 3-subset: rows are distinct rotations.
      auto set3 = pick_three(range, rng);
      std::vector<int> row0(set3.begin(), set3.end());
      shuffle_vec(row0, rng);
      int k = 1 + static_cast<int>(rng.uniform_int(2));
      int k2 = 3 - k;
      for (int c = 0; c < 3; ++c) {
        put(0, c, row0[static_cast<size_t>(c)]);
        put(1, c, row0[static_cast<size_t>((c + k) % 3)]);
        put(2, c, row0[static_cast<size_t>((c + k2) % 3)]);
      }
      break;
    }
  }
}

// All cells differing from `base` in exactly one of `ruled`, then (if short)
// in exactly two; enumeration order is fixed, selection is shuffled.
std::vector<SymbolicCell> impoverished_pool(const SymbolicCell& base,
                                            const std::vector<Attr>& ruled, Rng& rng) {
  std::vector<SymbolicCell> pool;
  for (Attr a : ruled)
    for (int v = 0; v < attr_range(a); ++v)
      if (v != base.get(a)) {
        SymbolicCell c = base;
        c.set(a, static_cast<uint8_t>(v));
        pool.push_back(c);
      }
  if (pool.size() < 7) {
    for (size_t i = 0; i < ruled.size(); ++i)
      for (size_t j = i + 1; j < ruled.size(); ++j)
        for (int v1 = 0; v1 < attr_range(ruled[i]); ++v1)
          for (int v2 = 0; v2 < attr_range(ruled[j]); ++v2)
            if (v1 != base.get(ruled[i]) && v2 != base.get(ruled[j])) {
              SymbolicCell c = base;
              c.set(ruled[i], static_cast<uint8_t>(v1));
              c.set(ruled[j], static_cast<uint8_t>(v2));
              pool.push_back(c);
            }
  }
  shuffle_vec(pool, rng);
  return pool;
}

std::array<SymbolicCell, 8> pick_options(const SymbolicCell& truth,
                                         const std::vector<Attr>& ruled, bool impoverish,
                                         Rng& rng, uint8_t* answer_slot) {
  std::vector<SymbolicCell> distractors;
  if (impoverish) {
    std::vector<SymbolicCell> pool = impoverished_pool(truth, ruled, rng);
    if (pool.size() < 7) throw UnsatisfiableRules("fewer than 7 single-change distractors exist");
    distractors.assign(pool.begin(), pool.begin() + 7);
  } else {
    uint32_t ruled_mask = 0;
    for (Attr a : ruled) ruled_mask |= 1u << static_cast<int>(a);
    int guard = 0;
    while (distractors.size() < 7) {
      if (++guard > 10000) throw UnsatisfiableRules("distractor sampling exhausted its retries");
      uint32_t mask = 1 + static_cast<uint32_t>(rng.uniform_int(7));
      if ((mask & ruled_mask) == 0) continue;  // must touch a ruled attribute
      SymbolicCell cand = truth;
      for (int ai = 0; ai < 3; ++ai) {
        if (!(mask & (1u << ai))) continue;
        int range = attr_range(kAttrs[ai]);
        int nv = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(range - 1)));
        if (nv >= cand.get(kAttrs[ai])) ++nv;
        cand.set(kAttrs[ai], static_cast<uint8_t>(nv));
      }
      if (std::find(distractors.begin(), distractors.end(), cand) != distractors.end()) continue;
      distractors.push_back(cand);
    }
  }
  std::array<SymbolicCell, 8> options{};
  uint8_t slot = static_cast<uint8_t>(rng.uniform_int(8));
  size_t di = 0;
  for (int i = 0; i < 8; ++i) {
    if (i == slot) options[static_cast<size_t>(i)] = truth;
    else options[static_cast<size_t>(i)] = distractors[di++];
  }
  *answer_slot = slot;
  return options;
}

}  // namespace

Instance generate_instance(const GenConfig& cfg, uint64_t index, RenderCache& cache) {
  Rng rng(Rng::mix(cfg.seed, index));
  Instance inst;
  inst.mode = cfg.mode;
  inst.h = inst.w = cfg.img_h;

  std::vector<Attr> ruled;
  if (cfg.mode == Mode::raven_like) {
    // one row-axis rule per attribute
    for (Attr a : kAttrs) {
      auto compat = compatible_rules(a, cfg.mode, cfg.allowed_rules);
      if (compat.empty())
        throw UnsatisfiableRules("no admissible rule for an attribute in the raven regime");
      Rule rule = compat[rng.uniform_int(compat.size())];
      inst.rules.push_back({a, rule, Axis::row});
      ruled.push_back(a);
      if (rule == Rule::distribute3) fill_attr_distribute_rowwise(inst.grid, a, rng);
      else fill_attr_rowwise(inst.grid, a, rule, rng);
    }
  } else {
    // two rules on two distinct attributes, both axes; the third attribute is noise
    std::vector<Attr> eligible;
    for (Attr a : kAttrs)
      if (!compatible_rules(a, cfg.mode, cfg.allowed_rules).empty()) eligible.push_back(a);
    if (eligible.size() < 2)
      throw UnsatisfiableRules("the pgm regime needs two attributes with admissible rules");
    std::vector<std::pair<Attr, Attr>> pairs;
    for (size_t i = 0; i < eligible.size(); ++i)
      for (size_t j = i + 1; j < eligible.size(); ++j)
        pairs.emplace_back(eligible[i], eligible[j]);
    auto pick = pairs[rng.uniform_int(pairs.size())];
    for (Attr a : {pick.first, pick.second}) {
      auto compat = compatible_rules(a, cfg.mode, cfg.allowed_rules);
      Rule rule = compat[rng.uniform_int(compat.size())];
      inst.rules.push_back({a, rule, Axis::row_and_column});
      ruled.push_back(a);
      fill_attr_both_axes(inst.grid, a, rule, rng);
    }
    for (Attr a : kAttrs) {
      if (std::find(ruled.begin(), ruled.end(), a) != ruled.end()) continue;
      for (int i = 0; i < 9; ++i)
        inst.grid[static_cast<size_t>(i)].set(
            a, static_cast<uint8_t>(rng.uniform_int(static_cast<uint64_t>(attr_range(a)))));
    }
  }

  inst.options = pick_options(inst.grid[8], ruled, cfg.impoverish, rng, &inst.answer);

  // construction should make the completion unique; verify rather than trust
  if (count_satisfying_options(inst.grid, inst.rules, inst.options) != 1)
    throw UnsatisfiableRules("generated options do not single out one completion");

  inst.pixels.resize(16 * static_cast<size_t>(inst.h) * static_cast<size_t>(inst.w));
  size_t panel = static_cast<size_t>(inst.h) * static_cast<size_t>(inst.w);
  for (int i = 0; i < 8; ++i)
    std::copy_n(cache.bitmap(inst.grid[static_cast<size_t>(i)], inst.h).data(), panel,
                inst.pixels.data() + static_cast<size_t>(i) * panel);
  for (int i = 0; i < 8; ++i)
    std::copy_n(cache.bitmap(inst.options[static_cast<size_t>(i)], inst.h).data(), panel,
                inst.pixels.data() + static_cast<size_t>(8 + i) * panel);
  return inst;
}

std::vector<Instance> generate_dataset(const GenConfig& cfg, uint64_t count) {
  std::vector<Instance> out;
  out.reserve(count);
  RenderCache cache;
  for (uint64_t i = 0; i < count; ++i) out.push_back(generate_instance(cfg, i, cache));
  return out;
}

}  // namespace rpmlab
