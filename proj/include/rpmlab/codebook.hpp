// codebook.hpp -- vector quantization with straight-through gradients.
//
// Nearest lookup is a literal scan of squared distances with strict-less
// comparison, so ties resolve to the lowest index and the result always
// agrees with a brute-force check. The quantized forward value is the code
// row; the backward pass routes gradients both to the encoder tokens (copied
// through) and to the selected rows (via the gather). Two commitment terms
// pull the pair together, each with one side held constant:
//   toward_codes:  sum ||z - sg(T_k)||^2   gradients reach z only
//   toward_tokens: sum ||sg(z) - T_k||^2   gradients reach T only
// Code rows can instead be maintained by exponential moving averages of their
// assigned tokens; components unused for `dead_window` consecutive updates are
// re-seeded from a random live token.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rpmlab/autodiff.hpp"
#include "rpmlab/checkpoint.hpp"
#include "rpmlab/nn.hpp"
#include "rpmlab/rng.hpp"

namespace rpmlab {

struct CodebookConfig {
  int64_t k = 256;
  int64_t d = 64;
  bool ema = true;          // EMA maintenance; otherwise toward_tokens trains T
  double gamma = 0.99;      // EMA decay
  double count_floor = 1e-8;
  int64_t dead_window = 100;
};

template <typename T>
struct Codebook {
  CodebookConfig cfg;
  Parameter<T> table;  // [K, d]
  Tensor<T> ema_count;     // [K]
  Tensor<T> ema_mean;      // [K, d]
  Tensor<T> usage;         // [K] cumulative assignment counts
  Tensor<T> unused_steps;  // [K] consecutive updates without an assignment

  Codebook() = default;
  Codebook(Registry<T>& reg, const std::string& prefix, const CodebookConfig& c) : cfg(c) {
    reg.make(&table, prefix + ".table", {c.k, c.d}, Init::uniform,
             1.0 / std::sqrt(static_cast<double>(c.d)));
    reset_stats();
  }

  // EMA statistics start as if each row had one self-assignment. Call again
  // after any external rewrite of the table (initialization included); the
  // means hold a snapshot of it.
  void reset_stats() {
    ema_count = tensor_full<T>({cfg.k}, T(1));
    ema_mean = table.value;
    usage = Tensor<T>({cfg.k});
    unused_steps = Tensor<T>({cfg.k});
  }

  // Strict-less literal scan; z: [R, d].
  std::vector<int64_t> nearest(const Tensor<T>& z) const {
    int64_t r_count = z.numel() / cfg.d;
    std::vector<int64_t> idx(static_cast<size_t>(r_count));
    const T* tab = table.value.ptr();
    for (int64_t r = 0; r < r_count; ++r) {
      const T* row = z.ptr() + r * cfg.d;
      T best = std::numeric_limits<T>::infinity();
      int64_t bi = 0;
      for (int64_t k = 0; k < cfg.k; ++k) {
        const T* code = tab + k * cfg.d;
        T dist = T(0);
        for (int64_t i = 0; i < cfg.d; ++i) {
          T c = row[i] - code[i];
          dist += c * c;
        }
        if (dist < best) {
          best = dist;
          bi = k;
        }
      }
      idx[static_cast<size_t>(r)] = bi;
    }
    return idx;
  }

  // Forward: selected code rows, shaped like z. Backward: identity into z,
  // scatter into the table.
  Value<T> quantize_st(Tape<T>& t, Value<T> z, const std::vector<int64_t>& idx) {
    Shape zs = z.shape();
    int64_t rows = z.numel() / cfg.d;
    Value<T> flat = reshape(z, {rows, cfg.d});
    Value<T> picked = index_select(table.use(t), 0, idx);
    Value<T> q = add(picked, sub(flat, stop_gradient(flat)));
    return reshape(q, zs);
  }

  // sum ||z - sg(T_k)||^2; never touches the table node.
  Value<T> loss_toward_codes(Tape<T>& t, Value<T> z, const std::vector<int64_t>& idx) {
    int64_t rows = z.numel() / cfg.d;
    Tensor<T> rows_const({rows, cfg.d});
    for (int64_t r = 0; r < rows; ++r)
      std::copy_n(table.value.ptr() + idx[static_cast<size_t>(r)] * cfg.d, cfg.d,
                  rows_const.ptr() + r * cfg.d);
    Value<T> diff = sub(reshape(z, {rows, cfg.d}), t.constant(std::move(rows_const)));
    return sum_all(mul(diff, diff));
  }

  // sum ||sg(z) - T_k||^2; never propagates into z.
  Value<T> loss_toward_tokens(Tape<T>& t, Value<T> z, const std::vector<int64_t>& idx) {
    Value<T> picked = index_select(table.use(t), 0, idx);
    Value<T> diff = sub(t.constant(Tensor<T>({z.numel() / cfg.d, cfg.d}, z.val().data)), picked);
    return sum_all(mul(diff, diff));
  }

  // One EMA maintenance step over the assignments of z's rows. Dead rows are
  // re-seeded from a random row of z.
  void ema_update(const Tensor<T>& z, const std::vector<int64_t>& idx, Rng& rng) {
    int64_t rows = z.numel() / cfg.d;
    Tensor<T> n({cfg.k});
    Tensor<T> sum({cfg.k, cfg.d});
    for (int64_t r = 0; r < rows; ++r) {
      int64_t k = idx[static_cast<size_t>(r)];
      n[k] += T(1);
      const T* row = z.ptr() + r * cfg.d;
      T* acc = sum.ptr() + k * cfg.d;
      for (int64_t i = 0; i < cfg.d; ++i) acc[i] += row[i];
    }
    T g = static_cast<T>(cfg.gamma);
    for (int64_t k = 0; k < cfg.k; ++k) {
      ema_count[k] = g * ema_count[k] + (T(1) - g) * n[k];
      T* mean = ema_mean.ptr() + k * cfg.d;
      const T* acc = sum.ptr() + k * cfg.d;
      for (int64_t i = 0; i < cfg.d; ++i) mean[i] = g * mean[i] + (T(1) - g) * acc[i];
      T denom = std::max(ema_count[k], static_cast<T>(cfg.count_floor));
      T* code = table.value.ptr() + k * cfg.d;
      for (int64_t i = 0; i < cfg.d; ++i) code[i] = mean[i] / denom;
      usage[k] += n[k];
      unused_steps[k] = n[k] > T(0) ? T(0) : unused_steps[k] + T(1);
      if (unused_steps[k] > static_cast<T>(cfg.dead_window) && rows > 0) {
        const T* seed = z.ptr() + static_cast<int64_t>(rng.uniform_int(rows)) * cfg.d;
        for (int64_t i = 0; i < cfg.d; ++i) {
          code[i] = seed[i];
          mean[i] = seed[i];
        }
        ema_count[k] = T(1);
        unused_steps[k] = T(0);
      }
    }
  }

  // Components not currently starved of assignments.
  int64_t live_components() const {
    int64_t live = 0;
    for (int64_t k = 0; k < cfg.k; ++k)
      live += unused_steps[k] < static_cast<T>(cfg.dead_window) ? 1 : 0;
    return live;
  }

  void stats_to(NamedTensors& nt, const std::string& prefix) const {
    nt.add(prefix + ".ema_count", ema_count.template cast<float>());
    nt.add(prefix + ".ema_mean", ema_mean.template cast<float>());
    nt.add(prefix + ".usage", usage.template cast<float>());
    nt.add(prefix + ".unused_steps", unused_steps.template cast<float>());
  }

  void stats_from(const NamedTensors& nt, const std::string& prefix) {
    auto need = [&](const std::string& name, const Shape& want) {
      const Tensor<float>* t = nt.find(name);
      if (t == nullptr) throw FormatError("checkpoint is missing " + name);
      if (t->shape != want)
        throw FormatError("checkpoint shape mismatch for " + name + ": " +
                          shape_str(t->shape) + " vs " + shape_str(want));
      return t->template cast<T>();
    };
    ema_count = need(prefix + ".ema_count", {cfg.k});
    ema_mean = need(prefix + ".ema_mean", {cfg.k, cfg.d});
    usage = need(prefix + ".usage", {cfg.k});
    unused_steps = need(prefix + ".unused_steps", {cfg.k});
  }
};

}  // namespace rpmlab
