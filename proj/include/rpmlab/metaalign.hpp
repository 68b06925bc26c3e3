// metaalign.hpp -- aligns row-pattern vectors with rule-directive embeddings.
//
// A learnable table holds one embedding per (attribute, rule) directive. For
// each instance the two row-pattern vectors of the context-only member are
// slot-averaged and matched against the table under a temperature-scaled
// softmax. Which pattern vector carries which of the instance's two directives
// is not identified, so the loss takes the cheaper of the two assignments
// (ties keep the identity assignment).
#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "rpmlab/autodiff.hpp"
#include "rpmlab/nn.hpp"
#include "rpmlab/symbolic.hpp"

namespace rpmlab {

// The two supervised directive ids of a pgm-style instance, in rule order.
inline std::array<int64_t, 2> directive_labels(const std::vector<RuleSpec>& rules) {
  if (rules.size() != 2)
    throw MetadataArityError("metadata supervision needs exactly two rules, got " +
                             std::to_string(rules.size()));
  return {directive_index(rules[0]), directive_index(rules[1])};
}

template <typename T>
struct MetaAlign {
  Parameter<T> directives;  // [L, d_p]
  Parameter<T> log_tau;     // [1]; temperature = exp(log_tau)
  int64_t n_directives = 0, d_p = 0;

  MetaAlign() = default;
  MetaAlign(Registry<T>& reg, const std::string& prefix, int64_t l, int64_t d_p_)
      : n_directives(l), d_p(d_p_) {
    reg.make(&directives, prefix + ".directives", {l, d_p_}, Init::uniform,
             1.0 / std::sqrt(static_cast<double>(d_p_)));
    reg.make(&log_tau, prefix + ".log_tau", {1}, Init::constant, std::log(1e-6));
  }

  // Slot-averaged row patterns: ctx_patterns [B, N, 4, d_p] -> [B, 2, d_p]
  // (group positions 0 and 1 are the two row lines).
  Value<T> row_queries(Tape<T>& t, Value<T> ctx_patterns) {
    (void)t;
    Value<T> q = permute(ctx_patterns, {0, 2, 3, 1});      // [B,4,d_p,N]
    q = mean_last(q, false);                               // [B,4,d_p]
    return slice_axis(q, 1, 0, 2);                         // [B,2,d_p]
  }

  Value<T> loss(Tape<T>& t, Value<T> ctx_patterns,
                const std::vector<std::array<int64_t, 2>>& labels) {
    int64_t b = ctx_patterns.shape()[0];
    Value<T> q = row_queries(t, ctx_patterns);
    Value<T> logits = matmul(q, directives.use(t), true);  // [B,2,L]
    Value<T> tau = exp_op(log_tau.use(t));
    Value<T> lp = log_softmax_last(divide(logits, tau));
    lp = reshape(lp, {b * 2, n_directives});
    std::vector<int64_t> id_t(static_cast<size_t>(b * 2)), sw_t(static_cast<size_t>(b * 2));
    for (int64_t i = 0; i < b; ++i) {
      id_t[static_cast<size_t>(2 * i)] = labels[static_cast<size_t>(i)][0];
      id_t[static_cast<size_t>(2 * i + 1)] = labels[static_cast<size_t>(i)][1];
      sw_t[static_cast<size_t>(2 * i)] = labels[static_cast<size_t>(i)][1];
      sw_t[static_cast<size_t>(2 * i + 1)] = labels[static_cast<size_t>(i)][0];
    }
    Value<T> s_id = sum_last(reshape(take_per_row(lp, id_t), {b, 2}), false);  // [B]
    Value<T> s_sw = sum_last(reshape(take_per_row(lp, sw_t), {b, 2}), false);
    // keep the assignment with the larger log-probability; ties -> identity
    Tensor<T> pick_id({b});
    for (int64_t i = 0; i < b; ++i)
      pick_id[i] = s_id.val()[i] >= s_sw.val()[i] ? T(1) : T(0);
    Tensor<T> pick_sw({b});
    for (int64_t i = 0; i < b; ++i) pick_sw[i] = T(1) - pick_id[i];
    Value<T> chosen = add(mul(s_id, t.constant(std::move(pick_id))),
                          mul(s_sw, t.constant(std::move(pick_sw))));
    return mul_scalar(sum_all(chosen), T(-1) / static_cast<T>(b));
  }

  // Fraction of directives recovered by argmax matching under the better of
  // the two assignments. q_means: [B, 2, d_p] raw values.
  double alignment_accuracy(const Tensor<T>& q_means,
                            const std::vector<std::array<int64_t, 2>>& labels) const {
    int64_t b = q_means.dim(0);
    int64_t hits = 0;
    for (int64_t i = 0; i < b; ++i) {
      int64_t pred[2];
      for (int64_t a = 0; a < 2; ++a) {
        const T* q = q_means.ptr() + (i * 2 + a) * d_p;
        T best = -std::numeric_limits<T>::infinity();
        int64_t bi = 0;
        for (int64_t l = 0; l < n_directives; ++l) {
          T dot = T(0);
          const T* y = directives.value.ptr() + l * d_p;
          for (int64_t j = 0; j < d_p; ++j) dot += q[j] * y[j];
          if (dot > best) {
            best = dot;
            bi = l;
          }
        }
        pred[a] = bi;
      }
      const auto& lab = labels[static_cast<size_t>(i)];
      int id_hits = (pred[0] == lab[0]) + (pred[1] == lab[1]);
      int sw_hits = (pred[0] == lab[1]) + (pred[1] == lab[0]);
      hits += id_hits >= sw_hits ? id_hits : sw_hits;
    }
    return static_cast<double>(hits) / static_cast<double>(2 * b);
  }
};

}  // namespace rpmlab
