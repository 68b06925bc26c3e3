// Parameter plumbing, module gradients, and checkpoint serialization.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <sstream>

#include "rpmlab/checkpoint.hpp"
#include "rpmlab/gradcheck.hpp"
#include "rpmlab/nn.hpp"

using namespace rpmlab;
using T = double;
using V = Value<T>;

namespace {

Tensor<T> rnd(const Shape& s, uint64_t seed, T lo = -1.0, T hi = 1.0) {
  Rng r(seed);
  return tensor_uniform<T>(s, r, lo, hi);
}

// Finite-difference check over every parameter of a registry, against a
// scalar loss built by a fresh-tape forward closure.
struct ModuleCase {
  Registry<T>* reg;
  std::function<V(Tape<T>&)> build;

  double loss_forward() {
    Tape<T> t;
    t.set_grad_enabled(false);
    double out = build(t).val()[0];
    reg->detach_all();
    return out;
  }

  void backward_fill() {
    Tape<T> t;
    V loss = build(t);
    t.backward(loss);
    reg->collect_grads();
    reg->detach_all();
  }

  GradCheckReport check(double base_h = 1e-4, double tol = 1e-6) {
    std::vector<GradCheckParam> ps;
    for (Parameter<T>* p : reg->params()) ps.push_back({p->name, &p->value, &p->grad});
    return grad_check([this] { return loss_forward(); }, [this] { backward_fill(); }, ps,
                      base_h, tol);
  }
};

// Weighted sum collapses a tensor output to the scalar the checker needs.
V weighted(Tape<T>& t, V out, uint64_t wseed) {
  Rng r(wseed);
  return sum_all(mul(out, t.constant(tensor_uniform<T>(out.shape(), r, -1.0, 1.0))));
}

}  // namespace

// ===== parameters and registry =====

TEST_CASE("duplicate parameter names are rejected") {
  Registry<T> reg;
  Parameter<T> a, b;
  reg.make(&a, "w", {2}, Init::zeros);
  CHECK_THROWS_AS(reg.make(&b, "w", {2}, Init::zeros), ConfigError);
}

TEST_CASE("initialization is deterministic in registration order") {
  auto build = [](Registry<T>& reg, Parameter<T>& p1, Parameter<T>& p2) {
    reg.make(&p1, "a", {4, 3}, Init::uniform, 0.5);
    reg.make(&p2, "b", {5}, Init::uniform, 0.1);
  };
  Registry<T> r1, r2, r3;
  Parameter<T> a1, b1, a2, b2, a3, b3;
  build(r1, a1, b1);
  build(r2, a2, b2);
  build(r3, a3, b3);
  r1.init_all(42);
  r2.init_all(42);
  r3.init_all(43);
  CHECK(a1.value.data == a2.value.data);
  CHECK(b1.value.data == b2.value.data);
  CHECK(a1.value.data != a3.value.data);
  for (T v : a1.value.data) {
    CHECK(v > -0.5);
    CHECK(v < 0.5);
  }
}

TEST_CASE("init kinds fill as named") {
  Registry<T> reg;
  Parameter<T> z, o, c;
  reg.make(&z, "z", {3}, Init::zeros);
  reg.make(&o, "o", {3}, Init::ones);
  reg.make(&c, "c", {3}, Init::constant, -2.5);
  reg.init_all(1);
  for (T v : z.value.data) CHECK(v == 0.0);
  for (T v : o.value.data) CHECK(v == 1.0);
  for (T v : c.value.data) CHECK(v == -2.5);
}

TEST_CASE("a parameter used twice on one tape accumulates one gradient") {
  Registry<T> reg;
  Parameter<T> w;
  reg.make(&w, "w", {3}, Init::uniform, 1.0);
  reg.init_all(7);
  Tensor<T> c1 = rnd({3}, 11), c2 = rnd({3}, 12);

  Tape<T> t;
  V loss = sum_all(add(mul(w.use(t), t.constant(c1)), mul(w.use(t), t.constant(c2))));
  t.backward(loss);
  reg.collect_grads();
  reg.detach_all();
  for (int64_t i = 0; i < 3; ++i) CHECK(w.grad[i] == doctest::Approx(c1[i] + c2[i]).epsilon(1e-12));
}

TEST_CASE("an unused parameter collects a zero gradient") {
  Registry<T> reg;
  Parameter<T> w, unused;
  reg.make(&w, "w", {2}, Init::ones);
  reg.make(&unused, "u", {4}, Init::ones);
  reg.init_all(1);
  Tape<T> t;
  V loss = sum_all(w.use(t));
  t.backward(loss);
  reg.collect_grads();
  reg.detach_all();
  CHECK(unused.grad.shape == Shape{4});
  for (T v : unused.grad.data) CHECK(v == 0.0);
}

TEST_CASE("fresh tapes get fresh leaves for the same parameter") {
  Registry<T> reg;
  Parameter<T> w;
  reg.make(&w, "w", {2}, Init::ones);
  reg.init_all(1);
  for (int round = 0; round < 2; ++round) {
    Tape<T> t;
    V loss = sum_all(mul(w.use(t), w.use(t)));
    t.backward(loss);
    reg.collect_grads();
    reg.detach_all();
    for (int64_t i = 0; i < 2; ++i) CHECK(w.grad[i] == doctest::Approx(2.0));
  }
}

// ===== module gradients =====

TEST_CASE("linear layer gradient") {
  Registry<T> reg;
  Linear<T> lin(reg, "lin", 4, 3);
  reg.init_all(5);
  Tensor<T> x = rnd({2, 5, 4}, 21);
  ModuleCase mc{&reg, [&](Tape<T>& t) { return weighted(t, lin.apply(t, t.constant(x)), 91); }};
  auto rep = mc.check();
  CHECK_MESSAGE(rep.pass, rep.worst_param, " rel err ", rep.max_rel_err);
}

TEST_CASE("layernorm module gradient") {
  Registry<T> reg;
  LayerNorm<T> ln(reg, "ln", 6);
  reg.init_all(5);
  Tensor<T> x = rnd({3, 6}, 22);
  ModuleCase mc{&reg, [&](Tape<T>& t) { return weighted(t, ln.apply(t, t.constant(x)), 92); }};
  auto rep = mc.check();
  CHECK_MESSAGE(rep.pass, rep.worst_param, " rel err ", rep.max_rel_err);
}

TEST_CASE("two-layer mlp gradient") {
  Registry<T> reg;
  Mlp2<T> mlp(reg, "mlp", 4, 7, 3);
  reg.init_all(5);
  Tensor<T> x = rnd({5, 4}, 23);
  ModuleCase mc{&reg, [&](Tape<T>& t) { return weighted(t, mlp.apply(t, t.constant(x)), 93); }};
  auto rep = mc.check();
  CHECK_MESSAGE(rep.pass, rep.worst_param, " rel err ", rep.max_rel_err);
}

TEST_CASE("attention sublayer gradient") {
  Registry<T> reg;
  AttnSublayer<T> attn(reg, "attn", 6, 2);
  reg.init_all(5);
  Tensor<T> x = rnd({2, 4, 6}, 24);
  ModuleCase mc{&reg, [&](Tape<T>& t) { return weighted(t, attn.apply(t, t.constant(x)), 94); }};
  auto rep = mc.check();
  CHECK_MESSAGE(rep.pass, rep.worst_param, " rel err ", rep.max_rel_err);
}

TEST_CASE("masked attention sublayer gradient") {
  Registry<T> reg;
  AttnSublayer<T> attn(reg, "attn", 6, 2);
  reg.init_all(6);
  Tensor<T> x = rnd({2, 4, 6}, 25);
  Tensor<T> mask = mask_block_key<T>(4, 0);
  ModuleCase mc{&reg,
                [&](Tape<T>& t) { return weighted(t, attn.apply(t, t.constant(x), &mask), 95); }};
  auto rep = mc.check();
  CHECK_MESSAGE(rep.pass, rep.worst_param, " rel err ", rep.max_rel_err);
}

TEST_CASE("encoder stack gradient") {
  Registry<T> reg;
  EncoderStack<T> enc(reg, "enc", 2, 6, 2, 12);
  reg.init_all(5);
  Tensor<T> x = rnd({2, 3, 6}, 26);
  ModuleCase mc{&reg, [&](Tape<T>& t) { return weighted(t, enc.apply(t, t.constant(x)), 96); }};
  auto rep = mc.check();
  CHECK_MESSAGE(rep.pass, rep.worst_param, " rel err ", rep.max_rel_err);
}

TEST_CASE("attention width must divide into heads") {
  Registry<T> reg;
  CHECK_THROWS_AS(AttnSublayer<T>(reg, "attn", 7, 2), ConfigError);
}

// ===== mask semantics =====

TEST_CASE("blocking key 0 makes other positions ignore token 0") {
  Registry<T> reg;
  AttnSublayer<T> attn(reg, "attn", 8, 2);
  reg.init_all(9);
  Tensor<T> x = rnd({1, 5, 8}, 31);
  Tensor<T> x2 = x;
  for (int64_t j = 0; j < 8; ++j) x2[j] += 0.37 * static_cast<double>(j + 1);  // perturb token 0
  Tensor<T> mask = mask_block_key<T>(5, 0);

  auto run = [&](const Tensor<T>& in, const Tensor<T>* m) {
    Tape<T> t;
    t.set_grad_enabled(false);
    Tensor<T> out = attn.apply(t, t.constant(in), m).val();
    reg.detach_all();
    return out;
  };
  Tensor<T> masked_a = run(x, &mask), masked_b = run(x2, &mask);
  Tensor<T> plain_a = run(x, nullptr), plain_b = run(x2, nullptr);

  // under the mask only position 0's own output moves
  double tail_diff = 0, head_diff = 0;
  for (int64_t i = 0; i < 8; ++i) head_diff += std::abs(masked_a[i] - masked_b[i]);
  for (int64_t i = 8; i < 5 * 8; ++i) tail_diff += std::abs(masked_a[i] - masked_b[i]);
  CHECK(head_diff > 1e-3);
  CHECK(tail_diff == 0.0);

  // without the mask the perturbation leaks everywhere
  double plain_tail = 0;
  for (int64_t i = 8; i < 5 * 8; ++i) plain_tail += std::abs(plain_a[i] - plain_b[i]);
  CHECK(plain_tail > 1e-6);
}

TEST_CASE("mask constant puts -inf exactly on the blocked key column") {
  Tensor<T> m = mask_block_key<T>(3, 1);
  for (int64_t q = 0; q < 3; ++q)
    for (int64_t k = 0; k < 3; ++k) {
      if (k == 1) CHECK(m[q * 3 + k] == -std::numeric_limits<T>::infinity());
      else CHECK(m[q * 3 + k] == 0.0);
    }
}

// ===== checkpoints =====

TEST_CASE("checkpoint round trip is bit-exact") {
  Rng r(77);
  NamedTensors nt;
  nt.add("alpha", tensor_uniform<float>({3, 4}, r, -10.f, 10.f));
  nt.add("beta.gamma", tensor_uniform<float>({7}, r, -1e-3f, 1e-3f));
  nt.add("empty_rank0", tensor_scalar<float>(0.25f));

  std::stringstream ss;
  save_tensors(ss, nt);
  NamedTensors back = load_tensors(ss);

  REQUIRE(back.items.size() == nt.items.size());
  for (size_t i = 0; i < nt.items.size(); ++i) {
    CHECK(back.items[i].first == nt.items[i].first);
    CHECK(back.items[i].second.shape == nt.items[i].second.shape);
    CHECK(std::memcmp(back.items[i].second.data.data(), nt.items[i].second.data.data(),
                      nt.items[i].second.data.size() * sizeof(float)) == 0);
  }

  // a second serialization of the loaded copy is byte-identical
  std::stringstream ss2;
  save_tensors(ss2, back);
  CHECK(ss2.str() == ss.str());
}

TEST_CASE("checkpoint header layout") {
  NamedTensors nt;
  nt.add("w", Tensor<float>({2}, {1.f, 2.f}));
  std::stringstream ss;
  save_tensors(ss, nt);
  std::string s = ss.str();
  REQUIRE(s.size() == 4u + 1u + 4u + 2u + 1u + 1u + 4u + 8u);
  CHECK(s.compare(0, 4, "RPCK") == 0);
  CHECK(s[4] == 1);                            // version
  CHECK(static_cast<uint8_t>(s[5]) == 1);      // count, little-endian
  CHECK(s[6] == 0);
  CHECK(static_cast<uint8_t>(s[9]) == 1);      // name length
  CHECK(s[11] == 'w');
  CHECK(static_cast<uint8_t>(s[12]) == 1);     // rank
  CHECK(static_cast<uint8_t>(s[13]) == 2);     // dim 0
}

TEST_CASE("duplicate checkpoint entries are rejected") {
  NamedTensors nt;
  nt.add("w", Tensor<float>({1}));
  CHECK_THROWS_AS(nt.add("w", Tensor<float>({2})), FormatError);
}

TEST_CASE("malformed checkpoints are rejected") {
  NamedTensors nt;
  nt.add("w", Tensor<float>({2}, {1.f, 2.f}));
  std::stringstream good;
  save_tensors(good, nt);
  std::string bytes = good.str();

  {
    std::stringstream bad(std::string("XXXX") + bytes.substr(4));
    CHECK_THROWS_AS(load_tensors(bad), FormatError);
  }
  {
    std::string v = bytes;
    v[4] = 9;
    std::stringstream bad(v);
    CHECK_THROWS_AS(load_tensors(bad), FormatError);
  }
  {
    std::stringstream bad(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(load_tensors(bad), TruncationError);
  }
  {
    std::stringstream bad(bytes.substr(0, 2));
    CHECK_THROWS_AS(load_tensors(bad), TruncationError);
  }
}

TEST_CASE("checkpoint file io round trip") {
  Rng r(78);
  NamedTensors nt;
  nt.add("theta", tensor_uniform<float>({4, 4}, r, -2.f, 2.f));
  std::string path = "substrate_ckpt_roundtrip.rpck";
  save_tensors(path, nt);
  NamedTensors back = load_tensors(path);
  REQUIRE(back.items.size() == 1u);
  CHECK(back.items[0].second.data == nt.items[0].second.data);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_tensors(path), FormatError);
}

TEST_CASE("parameter count bookkeeping") {
  Registry<T> reg;
  Linear<T> lin(reg, "lin", 4, 3);
  LayerNorm<T> ln(reg, "ln", 5);
  CHECK(reg.total_count() == 4 * 3 + 3 + 5 + 5);
}
