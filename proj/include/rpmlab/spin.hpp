// spin.hpp -- transformer blocks with a norm-bounded pose residual.
//
// A spin block runs the standard pre-norm attention sublayer, then adds a
// squashed linear "pose" readout back onto every token:
//   a    = x + MHA(LN(x))                       [B, N, d]
//   agg  = sum_{j,k} a[j, chunk k] * W[j,k]     [B, d]   one flat matmul
//   out  = a + squash(agg)                       broadcast over tokens
// W has one (d/M x d) matrix per (token j, chunk k); the straw variant
// replaces the per-token bank with a single bank applied to a global token
// that attends over the sequence but is invisible as a key to every query
// (including itself). A stack is L such blocks (each followed by the usual
// feed-forward sublayer) and one terminating plain encoder layer.
//
// With all pose banks zero the squash term vanishes and a block degrades to
// exactly the plain attention sublayer, so an L=1 stack must reproduce a
// 2-layer plain encoder; the tests pin that collapse.
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "rpmlab/autodiff.hpp"
#include "rpmlab/nn.hpp"

namespace rpmlab {

enum class Backbone { encoder, spin, straw_spin };

inline Backbone backbone_from_string(const std::string& s) {
  if (s == "encoder") return Backbone::encoder;
  if (s == "spin") return Backbone::spin;
  if (s == "straw_spin") return Backbone::straw_spin;
  throw ConfigError("unknown backbone: " + s);
}

inline const char* backbone_name(Backbone b) {
  switch (b) {
    case Backbone::encoder: return "encoder";
    case Backbone::spin: return "spin";
    case Backbone::straw_spin: return "straw_spin";
  }
  return "?";
}

// One attention sublayer plus the pose residual. In straw mode the caller
// threads the global token through: it is prepended for attention, masked out
// as a key, and its post-attention state drives the pose readout.
template <typename T>
struct SpinBlock {
  AttnSublayer<T> attn;
  Parameter<T> pose;  // [N, M, d/M, d] per-token banks, or [M, d/M, d] for straw
  bool straw = false;
  int64_t n_tokens = 0, d = 0;

  SpinBlock() = default;
  SpinBlock(Registry<T>& reg, const std::string& prefix, int64_t n, int64_t d_, int64_t heads,
            bool straw_, bool zero_pose)
      : attn(reg, prefix + ".attn", d_, heads), straw(straw_), n_tokens(n), d(d_) {
    Shape pshape = straw_ ? Shape{heads, d_ / heads, d_} : Shape{n, heads, d_ / heads, d_};
    double s = 1.0 / std::sqrt(static_cast<double>(d_));
    reg.make(&pose, prefix + ".pose", pshape, zero_pose ? Init::zeros : Init::uniform, s);
  }

  // Plain variant: x [B, N, d] -> [B, N, d].
  Value<T> apply(Tape<T>& t, Value<T> x) {
    int64_t b = x.shape()[0];
    Value<T> a = attn.apply(t, x);
    Value<T> w = reshape(pose.use(t), {n_tokens * d, d});
    Value<T> agg = matmul(reshape(a, {b, n_tokens * d}), w);
    return add(a, reshape(squash_last(agg), {b, 1, d}));
  }

  // Straw variant: returns the transformed tokens and the updated global token.
  std::pair<Value<T>, Value<T>> apply_straw(Tape<T>& t, Value<T> x, Value<T> z0,
                                            const Tensor<T>& key0_mask) {
    int64_t b = x.shape()[0];
    Value<T> a = attn.apply(t, concat(std::vector<Value<T>>{z0, x}, 1), &key0_mask);
    Value<T> z0_next = slice_axis(a, 1, 0, 1);                 // [B, 1, d]
    Value<T> tokens = slice_axis(a, 1, 1, n_tokens);           // [B, N, d]
    Value<T> w = reshape(pose.use(t), {d, d});
    Value<T> agg = matmul(reshape(z0_next, {b, d}), w);
    return {add(tokens, reshape(squash_last(agg), {b, 1, d})), z0_next};
  }
};

// Registered parameters are address-pinned: modules that own them must be
// constructed at their final location and never moved afterwards, hence the
// reserve calls and the heap-held terminal layer.
template <typename T>
struct SpinTransformer {
  std::vector<SpinBlock<T>> blocks;
  std::vector<FfnSublayer<T>> ffns;
  std::unique_ptr<EncoderLayer<T>> terminal;
  Parameter<T> global_token;  // [d], straw only
  bool straw = false;
  int64_t n_tokens = 0, d = 0;
  Tensor<T> key0_mask;

  SpinTransformer(Registry<T>& reg, const std::string& prefix, int64_t layers, int64_t n,
                  int64_t d_, int64_t heads, int64_t ffn_hidden, bool straw_,
                  bool zero_pose = false)
      : straw(straw_), n_tokens(n), d(d_) {
    blocks.reserve(static_cast<size_t>(layers));
    ffns.reserve(static_cast<size_t>(layers));
    for (int64_t i = 0; i < layers; ++i) {
      blocks.emplace_back(reg, prefix + ".block" + std::to_string(i), n, d_, heads, straw_,
                          zero_pose);
      ffns.emplace_back(reg, prefix + ".ffn" + std::to_string(i), d_, ffn_hidden);
    }
    terminal = std::make_unique<EncoderLayer<T>>(reg, prefix + ".terminal", d_, heads, ffn_hidden);
    if (straw_) {
      double s = 1.0 / std::sqrt(static_cast<double>(d_));
      reg.make(&global_token, prefix + ".global", {d_}, Init::uniform, s);
      key0_mask = mask_block_key<T>(n + 1, 0);
    }
  }

  Value<T> apply(Tape<T>& t, Value<T> x) {
    int64_t b = x.shape()[0];
    if (straw) {
      Value<T> z0 = broadcast_to(reshape(global_token.use(t), {1, 1, d}), {b, 1, d});
      for (size_t i = 0; i < blocks.size(); ++i) {
        auto [tokens, z0_next] = blocks[i].apply_straw(t, x, z0, key0_mask);
        x = ffns[i].apply(t, tokens);
        z0 = z0_next;
      }
    } else {
      for (size_t i = 0; i < blocks.size(); ++i)
        x = ffns[i].apply(t, blocks[i].apply(t, x));
    }
    return terminal->apply(t, x);
  }
};

// Backbone-selectable sequence encoder. Plain mode stacks n_layers standard
// encoder layers; spin modes stack n_layers logical spin layers plus the
// terminating plain layer.
template <typename T>
struct SeqEncoder {
  Backbone kind = Backbone::encoder;
  std::unique_ptr<EncoderStack<T>> plain;
  std::unique_ptr<SpinTransformer<T>> spun;

  SeqEncoder() = default;
  SeqEncoder(Registry<T>& reg, const std::string& prefix, Backbone kind_, int64_t n_layers,
             int64_t n_tokens, int64_t d, int64_t heads, int64_t ffn_hidden,
             bool zero_pose = false)
      : kind(kind_) {
    if (kind_ == Backbone::encoder)
      plain = std::make_unique<EncoderStack<T>>(reg, prefix, n_layers, d, heads, ffn_hidden);
    else
      spun = std::make_unique<SpinTransformer<T>>(reg, prefix, n_layers, n_tokens, d, heads,
                                                  ffn_hidden, kind_ == Backbone::straw_spin,
                                                  zero_pose);
  }

  Value<T> apply(Tape<T>& t, Value<T> x) {
    return kind == Backbone::encoder ? plain->apply(t, x) : spun->apply(t, x);
  }
};

}  // namespace rpmlab
