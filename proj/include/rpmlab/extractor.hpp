// extractor.hpp -- patch embedding plus a sequence encoder over panel tokens.
//
// A panel is cut into non-overlapping P x P patches (row-major), each patch is
// affinely embedded, a learned position embedding is added (no class token),
// the backbone runs, and a final per-token layer norm emits the tokens.
#pragma once

#include <cstdint>
#include <string>

#include "rpmlab/autodiff.hpp"
#include "rpmlab/errors.hpp"
#include "rpmlab/nn.hpp"
#include "rpmlab/spin.hpp"

namespace rpmlab {

struct ExtractorConfig {
  int64_t img_h = 32, img_w = 32;
  int64_t patch = 8;
  int64_t d = 64;
  int64_t heads = 4;
  int64_t layers = 3;
  int64_t ffn_mult = 4;
  Backbone backbone = Backbone::encoder;
  bool zero_pose = false;

  int64_t n_tokens() const { return (img_h / patch) * (img_w / patch); }
  int64_t patch_dim() const { return patch * patch; }
};

// [count, h*w] u8 panels -> [count, N, P*P] floats in [0,1].
template <typename T>
Tensor<T> patchify(const uint8_t* pixels, int64_t count, int64_t h, int64_t w, int64_t p) {
  if (p <= 0 || h % p != 0 || w % p != 0)
    throw ShapeError("patch size must divide the panel dimensions");
  int64_t gh = h / p, gw = w / p, n = gh * gw, pd = p * p;
  Tensor<T> out({count, n, pd});
  for (int64_t i = 0; i < count; ++i) {
    const uint8_t* img = pixels + i * h * w;
    for (int64_t br = 0; br < gh; ++br)
      for (int64_t bc = 0; bc < gw; ++bc) {
        T* dst = out.ptr() + ((i * n + br * gw + bc) * pd);
        for (int64_t r = 0; r < p; ++r)
          for (int64_t c = 0; c < p; ++c)
            dst[r * p + c] = static_cast<T>(img[(br * p + r) * w + bc * p + c]) / T(255);
      }
  }
  return out;
}

// [count, N, P*P] patches -> [count, h*w] u8 panels, values clamped to [0,1].
template <typename T>
std::vector<uint8_t> unpatchify(const Tensor<T>& patches, int64_t h, int64_t w, int64_t p) {
  int64_t gh = h / p, gw = w / p, n = gh * gw, pd = p * p;
  if (patches.rank() != 3 || patches.dim(1) != n || patches.dim(2) != pd)
    throw ShapeError("patch tensor does not match the panel geometry");
  int64_t count = patches.dim(0);
  std::vector<uint8_t> out(static_cast<size_t>(count * h * w));
  for (int64_t i = 0; i < count; ++i)
    for (int64_t br = 0; br < gh; ++br)
      for (int64_t bc = 0; bc < gw; ++bc) {
        const T* src = patches.ptr() + ((i * n + br * gw + bc) * pd);
        for (int64_t r = 0; r < p; ++r)
          for (int64_t c = 0; c < p; ++c) {
            T v = src[r * p + c];
            v = v < T(0) ? T(0) : (v > T(1) ? T(1) : v);
            out[static_cast<size_t>(i * h * w + (br * p + r) * w + bc * p + c)] =
                static_cast<uint8_t>(v * T(255) + T(0.5));
          }
      }
  return out;
}

template <typename T>
struct Extractor {
  ExtractorConfig cfg;
  Linear<T> embed;
  Parameter<T> pos;
  SeqEncoder<T> enc;
  LayerNorm<T> final_ln;

  Extractor() = default;
  Extractor(Registry<T>& reg, const std::string& prefix, const ExtractorConfig& c)
      : cfg(c),
        embed(reg, prefix + ".embed", c.patch_dim(), c.d),
        enc(reg, prefix + ".enc", c.backbone, c.layers, c.n_tokens(), c.d, c.heads,
            c.d * c.ffn_mult, c.zero_pose),
        final_ln(reg, prefix + ".final_ln", c.d) {
    reg.make(&pos, prefix + ".pos", {c.n_tokens(), c.d}, Init::uniform, 0.05);
  }

  // patches: [B, N, P*P] -> tokens [B, N, d]
  Value<T> apply(Tape<T>& t, Value<T> patches) {
    Value<T> x = add(embed.apply(t, patches), pos.use(t));
    return final_ln.apply(t, enc.apply(t, x));
  }
};

// Mirror path for reconstruction: encoder over quantized tokens, then a
// per-token affine back to patch pixels. Always a plain encoder stack.
template <typename T>
struct Decoder {
  Parameter<T> pos;
  EncoderStack<T> enc;
  LayerNorm<T> final_ln;
  Linear<T> out;

  Decoder() = default;
  Decoder(Registry<T>& reg, const std::string& prefix, const ExtractorConfig& c)
      : enc(reg, prefix + ".enc", c.layers, c.d, c.heads, c.d * c.ffn_mult),
        final_ln(reg, prefix + ".final_ln", c.d),
        out(reg, prefix + ".out", c.d, c.patch_dim()) {
    reg.make(&pos, prefix + ".pos", {c.n_tokens(), c.d}, Init::uniform, 0.05);
  }

  // tokens [B, N, d] -> patches [B, N, P*P]
  Value<T> apply(Tape<T>& t, Value<T> tokens) {
    Value<T> x = add(tokens, pos.use(t));
    return out.apply(t, final_ln.apply(t, enc.apply(t, x)));
  }
};

}  // namespace rpmlab
