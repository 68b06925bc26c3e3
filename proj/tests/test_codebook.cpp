// Vector quantization: nearest-scan agreement, one-sided commitment
// gradients, straight-through routing, and EMA maintenance.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "rpmlab/codebook.hpp"
#include "rpmlab/gradcheck.hpp"

using namespace rpmlab;
using T = double;
using V = Value<T>;

namespace {

Tensor<T> rnd(const Shape& s, uint64_t seed, T lo = -1.0, T hi = 1.0) {
  Rng r(seed);
  return tensor_uniform<T>(s, r, lo, hi);
}

CodebookConfig small_cfg(int64_t k = 6, int64_t d = 5) {
  CodebookConfig c;
  c.k = k;
  c.d = d;
  c.ema = true;
  c.gamma = 0.9;
  c.dead_window = 3;
  return c;
}

// Independent nearest oracle: same tie rule, distances accumulated through a
// running double in reverse coordinate order so the arithmetic path differs.
int64_t brute_nearest(const Tensor<T>& table, const T* row, int64_t k, int64_t d) {
  int64_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (int64_t c = 0; c < k; ++c) {
    double dist = 0;
    for (int64_t i = d - 1; i >= 0; --i) {
      double df = static_cast<double>(row[i]) - static_cast<double>(table[c * d + i]);
      dist += df * df;
    }
    if (dist < best_dist) {
      best_dist = dist;
      best = c;
    }
  }
  return best;
}

}  // namespace

// ===== nearest lookup =====

TEST_CASE("nearest agrees with a brute-force scan on 10,000 queries") {
  Registry<T> reg;
  Codebook<T> cb(reg, "cb", small_cfg(16, 8));
  reg.init_all(5);
  Tensor<T> z = rnd({10000, 8}, 61, -1.5, 1.5);
  std::vector<int64_t> got = cb.nearest(z);
  for (int64_t r = 0; r < 10000; ++r) {
    int64_t want = brute_nearest(cb.table.value, z.ptr() + r * 8, 16, 8);
    REQUIRE(got[static_cast<size_t>(r)] == want);
  }
}

TEST_CASE("nearest resolves ties to the lowest index") {
  Registry<T> reg;
  Codebook<T> cb(reg, "cb", small_cfg(4, 2));
  // duplicate rows 1 and 3; a query at their location must pick 1
  cb.table.value = Tensor<T>({4, 2}, {5, 5, 2, 2, -3, 0, 2, 2});
  Tensor<T> z({2, 2}, {2, 2, -3, 0});
  std::vector<int64_t> idx = cb.nearest(z);
  CHECK(idx[0] == 1);
  CHECK(idx[1] == 2);

  // equidistant between rows 0 and 2 of a symmetric table
  Codebook<T> cb2(reg, "cb2", small_cfg(3, 1));
  cb2.table.value = Tensor<T>({3, 1}, {-1, 10, 1});
  Tensor<T> mid({1, 1}, {0});
  CHECK(cb2.nearest(mid)[0] == 0);
}

// ===== one-sided gradients =====

TEST_CASE("toward-codes loss sends no gradient to the table") {
  Registry<T> reg;
  Codebook<T> cb(reg, "cb", small_cfg());
  reg.init_all(7);
  Tensor<T> z = rnd({9, 5}, 62);

  Tape<T> t;
  V zv = t.leaf(z, true);
  std::vector<int64_t> idx = cb.nearest(z);
  V l1 = cb.loss_toward_codes(t, zv, idx);
  t.backward(l1);
  reg.collect_grads();

  for (T g : cb.table.grad.data) CHECK(g == 0.0);

  // dz = 2 (z - T_k), exact
  for (int64_t r = 0; r < 9; ++r)
    for (int64_t i = 0; i < 5; ++i) {
      T want = 2 * (z[r * 5 + i] - cb.table.value[idx[static_cast<size_t>(r)] * 5 + i]);
      CHECK(zv.grad()[r * 5 + i] == want);
    }
  reg.detach_all();
}

TEST_CASE("toward-tokens loss sends no gradient to the tokens") {
  Registry<T> reg;
  Codebook<T> cb(reg, "cb", small_cfg());
  reg.init_all(8);
  Tensor<T> z = rnd({9, 5}, 63);

  Tape<T> t;
  V zv = t.leaf(z, true);
  std::vector<int64_t> idx = cb.nearest(z);
  V l2 = cb.loss_toward_tokens(t, zv, idx);
  t.backward(l2);
  reg.collect_grads();

  for (T g : zv.grad().data) CHECK(g == 0.0);  // z never entered the graph

  // dT_k = sum over assigned rows of 2 (T_k - z_r)
  Tensor<T> want({6, 5});
  for (int64_t r = 0; r < 9; ++r) {
    int64_t k = idx[static_cast<size_t>(r)];
    for (int64_t i = 0; i < 5; ++i)
      want[k * 5 + i] += 2 * (cb.table.value[k * 5 + i] - z[r * 5 + i]);
  }
  for (int64_t i = 0; i < want.numel(); ++i)
    CHECK(cb.table.grad[i] == doctest::Approx(want[i]).epsilon(1e-12));
  reg.detach_all();
}

TEST_CASE("toward-codes gradient w.r.t. tokens matches finite differences") {
  Registry<T> reg;
  Codebook<T> cb(reg, "cb", small_cfg());
  reg.init_all(9);
  Tensor<T> z = rnd({4, 5}, 64);
  Tensor<T> zgrad({4, 5});
  // assignments frozen at the base point; the loss is smooth given fixed idx
  std::vector<int64_t> idx = cb.nearest(z);

  auto fwd = [&] {
    Tape<T> t;
    t.set_grad_enabled(false);
    double out = cb.loss_toward_codes(t, t.constant(z), idx).val()[0];
    reg.detach_all();
    return out;
  };
  auto bwd = [&] {
    Tape<T> t;
    V zv = t.leaf(z, true);
    t.backward(cb.loss_toward_codes(t, zv, idx));
    zgrad = zv.grad();
    reg.detach_all();
  };
  std::vector<GradCheckParam> ps = {{"z", &z, &zgrad}};
  auto rep = grad_check(fwd, bwd, ps, 1e-4, 1e-6);
  CHECK_MESSAGE(rep.pass, "rel err ", rep.max_rel_err);
}

// ===== straight-through quantization =====

TEST_CASE("quantized forward equals the selected code rows bitwise") {
  Registry<T> reg;
  Codebook<T> cb(reg, "cb", small_cfg());
  reg.init_all(10);
  Tensor<T> z = rnd({2, 3, 5}, 65);  // shaped input round-trips through reshape
  std::vector<int64_t> idx = cb.nearest(z);

  Tape<T> t;
  t.set_grad_enabled(false);
  Tensor<T> q = cb.quantize_st(t, t.constant(z), idx).val();
  reg.detach_all();
  REQUIRE(q.shape == z.shape);
  for (int64_t r = 0; r < 6; ++r)
    for (int64_t i = 0; i < 5; ++i)
      CHECK(q[r * 5 + i] == cb.table.value[idx[static_cast<size_t>(r)] * 5 + i]);
}

TEST_CASE("straight-through gradient of a squared norm is 2 T_k") {
  Registry<T> reg;
  Codebook<T> cb(reg, "cb", small_cfg());
  reg.init_all(11);
  Tensor<T> z = rnd({3, 5}, 66);
  std::vector<int64_t> idx = cb.nearest(z);

  Tape<T> t;
  V zv = t.leaf(z, true);
  V q = cb.quantize_st(t, zv, idx);
  t.backward(sum_all(mul(q, q)));
  reg.collect_grads();

  // identity into z: d/dz ||q||^2 = 2 q = 2 T_k, exactly
  for (int64_t r = 0; r < 3; ++r)
    for (int64_t i = 0; i < 5; ++i)
      CHECK(zv.grad()[r * 5 + i] == 2 * cb.table.value[idx[static_cast<size_t>(r)] * 5 + i]);

  // the same flows into the selected table rows through the gather
  Tensor<T> want({6, 5});
  for (int64_t r = 0; r < 3; ++r) {
    int64_t k = idx[static_cast<size_t>(r)];
    for (int64_t i = 0; i < 5; ++i) want[k * 5 + i] += 2 * cb.table.value[k * 5 + i];
  }
  for (int64_t i = 0; i < want.numel(); ++i) CHECK(cb.table.grad[i] == want[i]);
  reg.detach_all();
}

// ===== EMA maintenance =====

TEST_CASE("ema update matches a hand-rolled reimplementation") {
  Registry<T> reg;
  CodebookConfig cfg = small_cfg(4, 3);
  Codebook<T> cb(reg, "cb", cfg);
  reg.init_all(12);
  cb.reset_stats();  // the means must snapshot the filled table

  // oracle state mirrors reset_stats
  Tensor<T> count = tensor_full<T>({4}, 1.0);
  Tensor<T> mean = cb.table.value;
  Tensor<T> table = cb.table.value;
  Tensor<T> unused({4});

  Rng data_rng(77);
  Rng update_rng(88), oracle_rng(88);
  for (int step = 0; step < 5; ++step) {
    Tensor<T> z = tensor_uniform<T>({7, 3}, data_rng, -1.0, 1.0);
    std::vector<int64_t> idx = cb.nearest(z);
    cb.ema_update(z, idx, update_rng);

    Tensor<T> n({4}), sum({4, 3});
    for (int64_t r = 0; r < 7; ++r) {
      int64_t k = idx[static_cast<size_t>(r)];
      n[k] += 1;
      for (int64_t i = 0; i < 3; ++i) sum[k * 3 + i] += z[r * 3 + i];
    }
    for (int64_t k = 0; k < 4; ++k) {
      count[k] = cfg.gamma * count[k] + (1 - cfg.gamma) * n[k];
      for (int64_t i = 0; i < 3; ++i) {
        mean[k * 3 + i] = cfg.gamma * mean[k * 3 + i] + (1 - cfg.gamma) * sum[k * 3 + i];
        table[k * 3 + i] = mean[k * 3 + i] / std::max(count[k], static_cast<T>(cfg.count_floor));
      }
      unused[k] = n[k] > 0 ? 0 : unused[k] + 1;
      if (unused[k] > static_cast<T>(cfg.dead_window)) {
        int64_t seed_row = oracle_rng.uniform_int(7);
        for (int64_t i = 0; i < 3; ++i) {
          table[k * 3 + i] = z[seed_row * 3 + i];
          mean[k * 3 + i] = z[seed_row * 3 + i];
        }
        count[k] = 1;
        unused[k] = 0;
      }
    }

    for (int64_t i = 0; i < 4; ++i) CHECK(cb.ema_count[i] == doctest::Approx(count[i]).epsilon(1e-14));
    for (int64_t i = 0; i < 12; ++i) {
      CHECK(cb.ema_mean[i] == doctest::Approx(mean[i]).epsilon(1e-14));
      CHECK(cb.table.value[i] == doctest::Approx(table[i]).epsilon(1e-14));
    }
  }
}

TEST_CASE("ema moves codes toward their assigned tokens") {
  Registry<T> reg;
  Codebook<T> cb(reg, "cb", small_cfg(2, 2));
  cb.table.value = Tensor<T>({2, 2}, {1, 0, -1, 0});
  cb.reset_stats();

  // every update assigns the same two clusters
  Tensor<T> z({4, 2}, {2, 1, 2, 1, -2, -1, -2, -1});
  Rng rng(5);
  double d0_before = std::abs(cb.table.value[0] - 2.0) + std::abs(cb.table.value[1] - 1.0);
  for (int step = 0; step < 60; ++step) cb.ema_update(z, cb.nearest(z), rng);
  double d0_after = std::abs(cb.table.value[0] - 2.0) + std::abs(cb.table.value[1] - 1.0);
  CHECK(d0_after < 0.05 * d0_before);
  CHECK(cb.usage[0] > 0);
  CHECK(cb.usage[1] > 0);
}

TEST_CASE("starved components are re-seeded from the batch") {
  Registry<T> reg;
  CodebookConfig cfg = small_cfg(3, 2);
  cfg.dead_window = 2;
  Codebook<T> cb(reg, "cb", cfg);
  cb.table.value = Tensor<T>({3, 2}, {0, 0, 10, 10, 100, 100});
  cb.reset_stats();

  // all rows sit at the origin, so components 1 and 2 starve
  Tensor<T> z({4, 2}, {0.1, 0, 0, 0.1, -0.1, 0, 0, -0.1});
  Rng rng(6);
  for (int step = 0; step < 8; ++step) cb.ema_update(z, cb.nearest(z), rng);

  CHECK(cb.live_components() == 3);  // refresh resets the starvation counters
  for (int64_t k = 1; k < 3; ++k) {
    bool matches_some_row = false;
    for (int64_t r = 0; r < 4; ++r) {
      // a re-seeded code then keeps EMA-tracking the batch; after the reset it
      // stays inside the data's bounding box instead of at its far-out start
      matches_some_row |= std::abs(cb.table.value[k * 2] ) <= 0.1 + 1e-12 &&
                          std::abs(cb.table.value[k * 2 + 1]) <= 0.1 + 1e-12;
      (void)r;
    }
    CHECK(matches_some_row);
  }
}

TEST_CASE("live component count reflects starvation") {
  Registry<T> reg;
  CodebookConfig cfg = small_cfg(3, 2);
  cfg.dead_window = 100;
  Codebook<T> cb(reg, "cb", cfg);
  cb.table.value = Tensor<T>({3, 2}, {0, 0, 10, 10, 100, 100});
  cb.reset_stats();
  CHECK(cb.live_components() == 3);

  Tensor<T> z({2, 2}, {0.1, 0, 10.1, 10});  // components 0 and 1 stay fed
  Rng rng(7);
  // exactly dead_window starved updates: counted dead, not yet re-seeded
  for (int step = 0; step < 100; ++step) cb.ema_update(z, cb.nearest(z), rng);
  CHECK(cb.live_components() == 2);
  // the next update crosses the window and revives component 2
  cb.ema_update(z, cb.nearest(z), rng);
  CHECK(cb.live_components() == 3);
}

// ===== stats serialization =====

TEST_CASE("ema statistics round trip through a checkpoint container") {
  Registry<T> reg;
  Codebook<T> cb(reg, "cb", small_cfg(4, 3));
  reg.init_all(13);
  cb.reset_stats();
  Rng rng(14);
  for (int step = 0; step < 4; ++step) {
    Tensor<T> z = rnd({5, 3}, 900 + static_cast<uint64_t>(step));
    cb.ema_update(z, cb.nearest(z), rng);
  }

  NamedTensors nt;
  cb.stats_to(nt, "cb");
  std::stringstream ss;
  save_tensors(ss, nt);

  Codebook<T> cb2(reg, "cb2", small_cfg(4, 3));
  cb2.stats_from(load_tensors(ss), "cb");
  // float-precision round trip: exact, because T entries came from floats is
  // not guaranteed, so compare at float resolution
  for (int64_t i = 0; i < 4; ++i)
    CHECK(static_cast<float>(cb2.ema_count[i]) == static_cast<float>(cb.ema_count[i]));
  for (int64_t i = 0; i < 12; ++i)
    CHECK(static_cast<float>(cb2.ema_mean[i]) == static_cast<float>(cb.ema_mean[i]));
  CHECK(cb2.usage.shape == Shape{4});

  NamedTensors missing;
  missing.add("cb.ema_count", Tensor<float>({4}));
  CHECK_THROWS_AS(cb2.stats_from(missing, "cb"), FormatError);

  NamedTensors wrong_shape;
  wrong_shape.add("cb.ema_count", Tensor<float>({9}));
  wrong_shape.add("cb.ema_mean", Tensor<float>({4, 3}));
  wrong_shape.add("cb.usage", Tensor<float>({4}));
  wrong_shape.add("cb.unused_steps", Tensor<float>({4}));
  CHECK_THROWS_AS(cb2.stats_from(wrong_shape, "cb"), FormatError);
}
