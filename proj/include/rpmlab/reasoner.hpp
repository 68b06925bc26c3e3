// reasoner.hpp -- item-wise deduction over grid lines and slot-wise scoring.
//
// Each candidate-completed 3x3 grid is probed by deleting one cell at a time
// (9 members). A member keeps its 4 complete lines (2 rows, 2 columns); across
// all members only 6 distinct lines exist (3 rows, 3 columns), so lines are
// embedded once and routed by fixed index tables. Per token slot:
//   line  = concat of its 3 cell tokens -> bottleneck MLP -> d_p
//   group = the member's 4 line vectors -> 1-layer encoder (no positions)
//   chain = for each of the 4 group positions, the 9 members' vectors
//           -> 1-layer encoder (no positions) -> scalar head
//   score = mean of all 36 head outputs, then mean over slots
// Option axis O is 8 answer panels during classification or K code rows when
// scoring codebook components. Every stage treats the slot axis as batch, so
// slot scores are bitwise independent across slots.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "rpmlab/autodiff.hpp"
#include "rpmlab/nn.hpp"
#include "rpmlab/spin.hpp"

namespace rpmlab {

// Line id 0..2 = rows, 3..5 = columns; entry = the 3 grid cells on the line.
inline const std::array<std::array<int64_t, 3>, 6>& line_cells() {
  static const std::array<std::array<int64_t, 3>, 6> t = {{
      {0, 1, 2}, {3, 4, 5}, {6, 7, 8},  // rows
      {0, 3, 6}, {1, 4, 7}, {2, 5, 8},  // columns
  }};
  return t;
}

// Member m deletes cell m; its complete lines are the rows and columns that
// avoid cell m, rows first, ascending.
inline const std::array<std::array<int64_t, 4>, 9>& member_lines() {
  static const std::array<std::array<int64_t, 4>, 9> t = [] {
    std::array<std::array<int64_t, 4>, 9> m{};
    for (int64_t cell = 0; cell < 9; ++cell) {
      int64_t r = cell / 3, c = cell % 3;
      int64_t out[4], w = 0;
      for (int64_t i = 0; i < 3; ++i)
        if (i != r) out[w++] = i;  // row lines
      for (int64_t i = 0; i < 3; ++i)
        if (i != c) out[w++] = 3 + i;  // column lines
      m[static_cast<size_t>(cell)] = {out[0], out[1], out[2], out[3]};
    }
    return m;
  }();
  return t;
}

struct ReasonerConfig {
  int64_t d = 64;    // slot token width from the extractor
  int64_t d_p = 64;  // pattern width
  int64_t heads = 4;
  int64_t ffn_mult = 4;
  Backbone backbone = Backbone::encoder;
  bool zero_pose = false;
};

template <typename T>
struct ReasonerOut {
  Value<T> scores;        // [B, O]
  Value<T> per_slot;      // [B, O, N]
  Value<T> ctx_patterns;  // [B, N, 4, d_p] pattern groups of the context-only member
};

template <typename T>
struct Reasoner {
  ReasonerConfig cfg;
  Mlp2<T> line_mlp;       // 3d -> d_p/2 -> d_p
  SeqEncoder<T> pattern_enc;  // over a member's 4 line vectors
  SeqEncoder<T> chain_enc;    // over the 9 members at one group position
  Mlp2<T> head;           // d_p -> d_p/2 -> 1

  Reasoner() = default;
  Reasoner(Registry<T>& reg, const std::string& prefix, const ReasonerConfig& c)
      : cfg(c),
        line_mlp(reg, prefix + ".line_mlp", 3 * c.d, c.d_p / 2, c.d_p),
        pattern_enc(reg, prefix + ".pattern_enc", c.backbone, 1, 4, c.d_p, c.heads,
                    c.d_p * c.ffn_mult, c.zero_pose),
        chain_enc(reg, prefix + ".chain_enc", c.backbone, 1, 9, c.d_p, c.heads,
                  c.d_p * c.ffn_mult, c.zero_pose),
        head(reg, prefix + ".head", c.d_p, c.d_p / 2, 1) {}

  // ctx: [B, 8, N, d] context panel tokens; cell9: [B, O, N, 1, d] candidate
  // tokens for the missing cell (answer panels or broadcast code rows).
  ReasonerOut<T> apply(Tape<T>& t, Value<T> ctx, Value<T> cell9) {
    int64_t b = ctx.shape()[0], n = ctx.shape()[2], d = cfg.d;
    int64_t o = cell9.shape()[1];
    Value<T> c = permute(ctx, {0, 2, 1, 3});                        // [B,N,8,d]
    c = broadcast_to(reshape(c, {b, 1, n, 8, d}), {b, o, n, 8, d});
    Value<T> grids = concat(std::vector<Value<T>>{c, cell9}, 3);    // [B,O,N,9,d]

    // the 6 distinct lines, each as its 3 concatenated cell tokens
    std::vector<int64_t> gather;
    for (const auto& line : line_cells())
      for (int64_t cell : line) gather.push_back(cell);
    Value<T> lines = index_select(grids, 3, gather);                // [B,O,N,18,d]
    lines = line_mlp.apply(t, reshape(lines, {b, o, n, 6, 3 * d}));  // [B,O,N,6,d_p]

    // route lines to members, then encode each member's group of 4
    std::vector<int64_t> routes;
    for (const auto& m : member_lines())
      for (int64_t line : m) routes.push_back(line);
    Value<T> groups = index_select(lines, 3, routes);               // [B,O,N,36,d_p]
    groups = reshape(groups, {b * o * n * 9, 4, cfg.d_p});
    groups = pattern_enc.apply(t, groups);                          // [B*O*N*9,4,d_p]
    groups = reshape(groups, {b, o, n, 9, 4, cfg.d_p});

    // context-only member (deletion of cell 8) from option lane 0; its lines
    // avoid cell 8, so any lane would give the same values
    Value<T> ctx_pat = index_select(groups, 1, {0});
    ctx_pat = reshape(index_select(ctx_pat, 3, {8}), {b, n, 4, cfg.d_p});

    // chain the 9 members at each group position
    Value<T> chains = permute(groups, {0, 1, 2, 4, 3, 5});          // [B,O,N,4,9,d_p]
    chains = reshape(chains, {b * o * n * 4, 9, cfg.d_p});
    chains = chain_enc.apply(t, chains);
    Value<T> verdicts = head.apply(t, chains);                      // [B*O*N*4,9,1]
    verdicts = reshape(verdicts, {b, o, n, 36});
    Value<T> per_slot = mean_last(verdicts, false);                 // [B,O,N]
    Value<T> scores = mean_last(per_slot, false);                   // [B,O]
    return {scores, per_slot, ctx_pat};
  }
};

// Mean cross-entropy of the answer slot under a softmax over option scores.
template <typename T>
Value<T> choice_loss(Tape<T>& t, Value<T> scores, const std::vector<int64_t>& answers) {
  (void)t;
  int64_t b = scores.shape()[0];
  Value<T> lp = log_softmax_last(scores);
  return mul_scalar(sum_all(take_per_row(lp, answers)), T(-1) / static_cast<T>(b));
}

// Option-choice accuracy by argmax (first index wins ties).
template <typename T>
double choice_accuracy(const Tensor<T>& scores, const std::vector<int64_t>& answers) {
  int64_t b = scores.dim(0), o = scores.dim(1);
  int64_t hits = 0;
  for (int64_t r = 0; r < b; ++r) {
    const T* row = scores.ptr() + r * o;
    int64_t best = 0;
    for (int64_t i = 1; i < o; ++i)
      if (row[i] > row[best]) best = i;
    hits += best == answers[static_cast<size_t>(r)] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(b);
}

// Component-alignment loss: per slot, the nearest code to the true answer's
// token must win the softmax over component scores at temperature tau.
//   per_slot_k: [B, K, N]; targets: [B*N] nearest-code ids, slot-major per row.
template <typename T>
Value<T> component_choice_loss(Tape<T>& t, Value<T> per_slot_k,
                               const std::vector<int64_t>& targets, double tau) {
  (void)t;
  int64_t b = per_slot_k.shape()[0], k = per_slot_k.shape()[1], n = per_slot_k.shape()[2];
  Value<T> s = permute(per_slot_k, {0, 2, 1});  // [B,N,K]
  s = mul_scalar(reshape(s, {b * n, k}), T(1.0 / tau));
  Value<T> lp = log_softmax_last(s);
  return mul_scalar(sum_all(take_per_row(lp, targets)), T(-1) / static_cast<T>(b));
}

}  // namespace rpmlab
