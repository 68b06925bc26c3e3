// nn.hpp -- trainable parameters and the standard transformer building blocks.
//
// Parameters are plain tensors owned by their modules; a Registry keeps
// pointers in registration order, which fixes both the initialization stream
// and the optimizer state layout. Parameter::use() memoizes the tape leaf per
// forward pass so a weight consumed twice accumulates one gradient buffer.
#pragma once

#include <cstdint>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "rpmlab/autodiff.hpp"
#include "rpmlab/errors.hpp"
#include "rpmlab/rng.hpp"
#include "rpmlab/tensor.hpp"

namespace rpmlab {

enum class Init { zeros, ones, uniform, constant };

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Init init = Init::zeros;
  double init_scale = 0.0;  // uniform draws from (-scale, +scale)

  Value<T> use(Tape<T>& tape) {
    if (node_ == nullptr || tape_ != &tape || epoch_ != tape.epoch()) {
      Value<T> v = tape.leaf(value, true);
      node_ = v.node();
      tape_ = &tape;
      epoch_ = tape.epoch();
    }
    return Value<T>(node_, &tape);
  }

  // Copies the accumulated gradient out of the tape (zeros if unused).
  void collect_grad() {
    if (node_ != nullptr && !node_->grad.data.empty()) grad = node_->grad;
    else grad = Tensor<T>(value.shape);
  }

  void detach() { node_ = nullptr; tape_ = nullptr; }

 private:
  Node<T>* node_ = nullptr;
  Tape<T>* tape_ = nullptr;
  uint64_t epoch_ = 0;
};

template <typename T>
class Registry {
 public:
  void add(Parameter<T>* p) {
    if (!names_.insert(p->name).second)
      throw ConfigError("duplicate parameter name: " + p->name);
    params_.push_back(p);
  }

  Parameter<T>* make(Parameter<T>* p, std::string name, Shape shape, Init init,
                     double scale = 0.0) {
    p->name = std::move(name);
    p->value = Tensor<T>(std::move(shape));
    p->init = init;
    p->init_scale = scale;
    add(p);
    return p;
  }

  // Fills every parameter in registration order from one seeded stream.
  void init_all(uint64_t seed) {
    Rng rng(seed);
    for (Parameter<T>* p : params_) {
      switch (p->init) {
        case Init::zeros: p->value = Tensor<T>(p->value.shape); break;
        case Init::ones: p->value = tensor_full<T>(p->value.shape, T(1)); break;
        case Init::uniform:
          p->value = tensor_uniform<T>(p->value.shape, rng, T(-p->init_scale),
                                       T(p->init_scale));
          break;
        case Init::constant:
          p->value = tensor_full<T>(p->value.shape, T(p->init_scale));
          break;
      }
    }
  }

  const std::vector<Parameter<T>*>& params() const { return params_; }

  int64_t total_count() const {
    int64_t n = 0;
    for (const Parameter<T>* p : params_) n += p->value.numel();
    return n;
  }

  void collect_grads() {
    for (Parameter<T>* p : params_) p->collect_grad();
  }

  void detach_all() {
    for (Parameter<T>* p : params_) p->detach();
  }

 private:
  std::vector<Parameter<T>*> params_;
  std::set<std::string> names_;
};

// ---------------------------------------------------------------------------
// modules
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
  Parameter<T> w;  // [out, in]
  Parameter<T> b;  // [out]
  bool with_bias = true;

  Linear() = default;
  Linear(Registry<T>& reg, const std::string& prefix, int64_t in, int64_t out,
         bool bias = true)
      : with_bias(bias) {
    double s = 1.0 / std::sqrt(static_cast<double>(in));
    reg.make(&w, prefix + ".w", {out, in}, Init::uniform, s);
    if (with_bias) reg.make(&b, prefix + ".b", {out}, Init::uniform, s);
  }

  Value<T> apply(Tape<T>& t, Value<T> x) {
    Value<T> y = matmul(x, w.use(t), true);
    return with_bias ? add(y, b.use(t)) : y;
  }
};

template <typename T>
struct LayerNorm {
  Parameter<T> gain;
  Parameter<T> bias;

  LayerNorm() = default;
  LayerNorm(Registry<T>& reg, const std::string& prefix, int64_t d) {
    reg.make(&gain, prefix + ".gain", {d}, Init::ones);
    reg.make(&bias, prefix + ".bias", {d}, Init::zeros);
  }

  Value<T> apply(Tape<T>& t, Value<T> x) {
    return layernorm_last(x, gain.use(t), bias.use(t));
  }
};

// Two affine maps with a GELU between; covers feed-forward blocks, the line
// bottleneck, and scoring heads.
template <typename T>
struct Mlp2 {
  Linear<T> l1, l2;

  Mlp2() = default;
  Mlp2(Registry<T>& reg, const std::string& prefix, int64_t in, int64_t hidden, int64_t out)
      : l1(reg, prefix + ".l1", in, hidden), l2(reg, prefix + ".l2", hidden, out) {}

  Value<T> apply(Tape<T>& t, Value<T> x) { return l2.apply(t, gelu(l1.apply(t, x))); }
};

// Additive attention mask constant: entry [q, k] is added to the logits.
template <typename T>
Tensor<T> mask_block_key(int64_t s, int64_t key) {
  Tensor<T> m({s, s});
  for (int64_t q = 0; q < s; ++q)
    m[q * s + key] = -std::numeric_limits<T>::infinity();
  return m;
}

// Pre-norm residual multi-head self-attention: x + MHA(LN(x)).
template <typename T>
struct AttnSublayer {
  LayerNorm<T> ln;
  Linear<T> wq, wk, wv, wo;
  int64_t d = 0, heads = 0;

  AttnSublayer() = default;
  // The key projection carries no bias: softmax is invariant to a per-query
  // constant added to every logit, so a key bias is unlearnable by design.
  AttnSublayer(Registry<T>& reg, const std::string& prefix, int64_t d_, int64_t heads_)
      : ln(reg, prefix + ".ln", d_),
        wq(reg, prefix + ".wq", d_, d_),
        wk(reg, prefix + ".wk", d_, d_, false),
        wv(reg, prefix + ".wv", d_, d_),
        wo(reg, prefix + ".wo", d_, d_),
        d(d_),
        heads(heads_) {
    if (d_ % heads_ != 0) throw ConfigError("attention width must divide into heads");
  }

  // x: [B, S, d]; mask: optional [S, S] additive logits term.
  Value<T> apply(Tape<T>& t, Value<T> x, const Tensor<T>* mask = nullptr) {
    int64_t b = x.shape()[0], s = x.shape()[1];
    int64_t dh = d / heads;
    Value<T> h = ln.apply(t, x);
    auto split = [&](Value<T> v) {
      // [B,S,d] -> [B,M,S,dh] -> [B*M,S,dh]
      v = reshape(v, {b, s, heads, dh});
      v = permute(v, {0, 2, 1, 3});
      return reshape(v, {b * heads, s, dh});
    };
    Value<T> q = split(wq.apply(t, h));
    Value<T> k = split(wk.apply(t, h));
    Value<T> v = split(wv.apply(t, h));
    Value<T> logits = matmul(mul_scalar(q, T(1.0 / std::sqrt(static_cast<double>(dh)))), k, true);
    if (mask != nullptr) logits = add(logits, t.constant(*mask));
    Value<T> att = softmax_last(logits);
    Value<T> o = matmul(att, v);  // [B*M, S, dh]
    o = reshape(o, {b, heads, s, dh});
    o = permute(o, {0, 2, 1, 3});
    o = reshape(o, {b, s, d});
    return add(x, wo.apply(t, o));
  }
};

// Pre-norm residual feed-forward: x + MLP(LN(x)).
template <typename T>
struct FfnSublayer {
  LayerNorm<T> ln;
  Mlp2<T> mlp;

  FfnSublayer() = default;
  FfnSublayer(Registry<T>& reg, const std::string& prefix, int64_t d, int64_t hidden)
      : ln(reg, prefix + ".ln", d), mlp(reg, prefix + ".mlp", d, hidden, d) {}

  Value<T> apply(Tape<T>& t, Value<T> x) { return add(x, mlp.apply(t, ln.apply(t, x))); }
};

template <typename T>
struct EncoderLayer {
  AttnSublayer<T> attn;
  FfnSublayer<T> ffn;

  EncoderLayer() = default;
  EncoderLayer(Registry<T>& reg, const std::string& prefix, int64_t d, int64_t heads,
               int64_t ffn_hidden)
      : attn(reg, prefix + ".attn", d, heads), ffn(reg, prefix + ".ffn", d, ffn_hidden) {}

  Value<T> apply(Tape<T>& t, Value<T> x, const Tensor<T>* mask = nullptr) {
    return ffn.apply(t, attn.apply(t, x, mask));
  }
};

template <typename T>
struct EncoderStack {
  std::vector<EncoderLayer<T>> layers;

  EncoderStack() = default;
  EncoderStack(Registry<T>& reg, const std::string& prefix, int64_t n_layers, int64_t d,
               int64_t heads, int64_t ffn_hidden) {
    layers.reserve(n_layers);
    for (int64_t i = 0; i < n_layers; ++i)
      layers.emplace_back(reg, prefix + ".layer" + std::to_string(i), d, heads, ffn_hidden);
  }

  Value<T> apply(Tape<T>& t, Value<T> x, const Tensor<T>* mask = nullptr) {
    for (auto& l : layers) x = l.apply(t, x, mask);
    return x;
  }
};

}  // namespace rpmlab
