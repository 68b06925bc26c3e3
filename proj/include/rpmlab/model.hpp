// model.hpp -- the full solver: extractor, optional codebook and decoder,
// reasoner, optional metadata alignment, wired per training activity.
//
// Activities:
//   act1        choice loss only, plain encoder backbone
//   act2        adds the codebook path: commitment terms and reconstruction
//   act3        act2 plus the staged component-alignment loss
//   act4        act1 with the spin backbone
//   act4_straw  act1 with the straw-spin backbone
//   meta        act1 plus metadata alignment supervision
#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "rpmlab/autodiff.hpp"
#include "rpmlab/checkpoint.hpp"
#include "rpmlab/codebook.hpp"
#include "rpmlab/errors.hpp"
#include "rpmlab/extractor.hpp"
#include "rpmlab/generator.hpp"
#include "rpmlab/metaalign.hpp"
#include "rpmlab/nn.hpp"
#include "rpmlab/reasoner.hpp"
#include "rpmlab/spin.hpp"

namespace rpmlab {

enum class Act { act1, act2, act3, act4, act4_straw, meta };

inline Act act_from_string(const std::string& s) {
  if (s == "act1") return Act::act1;
  if (s == "act2") return Act::act2;
  if (s == "act3") return Act::act3;
  if (s == "act4") return Act::act4;
  if (s == "act4_straw") return Act::act4_straw;
  if (s == "meta") return Act::meta;
  throw ConfigError("unknown activity: " + s);
}

inline const char* act_name(Act a) {
  switch (a) {
    case Act::act1: return "act1";
    case Act::act2: return "act2";
    case Act::act3: return "act3";
    case Act::act4: return "act4";
    case Act::act4_straw: return "act4_straw";
    case Act::meta: return "meta";
  }
  return "?";
}

struct ModelConfig {
  int64_t img_h = 32, img_w = 32, patch = 8;
  int64_t d = 64, heads = 4, layers = 3, ffn_mult = 4;
  int64_t d_p = 64;
  int64_t k = 256;
  bool ema = true;
  double gamma = 0.99;
  int64_t dead_window = 100;
  Act act = Act::act1;
  double lambda_toward_tokens = 0.25;
  double tau_components = 0.01;
  double stage_fraction = 0.5;
  bool zero_pose = false;  // test hook for the collapse checks

  Backbone backbone() const {
    if (act == Act::act4) return Backbone::spin;
    if (act == Act::act4_straw) return Backbone::straw_spin;
    return Backbone::encoder;
  }
  bool uses_codebook() const { return act == Act::act2 || act == Act::act3; }
  bool uses_meta() const { return act == Act::meta; }

  ExtractorConfig extractor_config() const {
    ExtractorConfig e;
    e.img_h = img_h;
    e.img_w = img_w;
    e.patch = patch;
    e.d = d;
    e.heads = heads;
    e.layers = layers;
    e.ffn_mult = ffn_mult;
    e.backbone = backbone();
    e.zero_pose = zero_pose;
    return e;
  }
};

template <typename T>
struct BatchResult {
  Value<T> total;                        // scalar loss node
  std::map<std::string, double> terms;   // individual term values
  Tensor<T> scores;                      // [B, 8] option scores
  Tensor<T> raw_tokens;                  // [B*16, N, d] pre-quantization tokens
  std::vector<int64_t> token_codes;      // nearest code per token (codebook acts)
};

template <typename T>
class SolverModel {
 public:
  ModelConfig cfg;
  Registry<T> reg;
  std::unique_ptr<Extractor<T>> extractor;
  std::unique_ptr<Codebook<T>> codebook;
  std::unique_ptr<Decoder<T>> decoder;
  std::unique_ptr<Reasoner<T>> reasoner;
  std::unique_ptr<MetaAlign<T>> meta;

  explicit SolverModel(const ModelConfig& c) : cfg(c) {
    ExtractorConfig ec = c.extractor_config();
    extractor = std::make_unique<Extractor<T>>(reg, "extractor", ec);
    if (c.uses_codebook()) {
      CodebookConfig cc;
      cc.k = c.k;
      cc.d = c.d;
      cc.ema = c.ema;
      cc.gamma = c.gamma;
      cc.dead_window = c.dead_window;
      codebook = std::make_unique<Codebook<T>>(reg, "codebook", cc);
      decoder = std::make_unique<Decoder<T>>(reg, "decoder", ec);
    }
    ReasonerConfig rc;
    rc.d = c.d;
    rc.d_p = c.d_p;
    rc.heads = c.heads;
    rc.ffn_mult = c.ffn_mult;
    rc.backbone = c.backbone();
    rc.zero_pose = c.zero_pose;
    reasoner = std::make_unique<Reasoner<T>>(reg, "reasoner", rc);
    if (c.uses_meta()) meta = std::make_unique<MetaAlign<T>>(reg, "meta", kDirectiveCount, c.d_p);
  }

  void init_params(uint64_t seed) {
    reg.init_all(seed);
    // EMA statistics snapshot the table, so they must be rebuilt after the
    // table itself is filled.
    if (codebook != nullptr) codebook->reset_stats();
  }

  // In EMA mode the code table is maintained by averages, not by the optimizer.
  bool optimizer_skips(const Parameter<T>* p) const {
    return codebook != nullptr && cfg.ema && p == &codebook->table;
  }

  Tensor<T> batch_patches(const std::vector<const Instance*>& batch) const {
    const ExtractorConfig ec = cfg.extractor_config();
    int64_t n = ec.n_tokens(), pd = ec.patch_dim();
    int64_t b = static_cast<int64_t>(batch.size());
    Tensor<T> out({b * 16, n, pd});
    for (int64_t i = 0; i < b; ++i) {
      const Instance& inst = *batch[static_cast<size_t>(i)];
      if (inst.h != cfg.img_h || inst.w != cfg.img_w)
        throw ShapeError("instance panels do not match the configured geometry");
      Tensor<T> p16 = patchify<T>(inst.pixels.data(), 16, inst.h, inst.w, cfg.patch);
      std::copy_n(p16.ptr(), p16.numel(), out.ptr() + i * 16 * n * pd);
    }
    return out;
  }

  // One full forward building the activity's composite loss.
  BatchResult<T> forward(Tape<T>& t, const std::vector<const Instance*>& batch,
                         bool component_stage_active) {
    int64_t b = static_cast<int64_t>(batch.size());
    int64_t n = cfg.extractor_config().n_tokens(), d = cfg.d;
    BatchResult<T> out;

    Value<T> patches = t.constant(batch_patches(batch));
    Value<T> tokens = extractor->apply(t, patches);  // [B*16, N, d]
    out.raw_tokens = tokens.val();

    Value<T> reason_tokens = tokens;
    Value<T> recon_pair[2];  // toward_codes, reconstruction
    bool have_l2 = false;
    Value<T> l2;
    if (codebook != nullptr) {
      // every term is the batch mean of a per-instance sum over the 16 panels
      out.token_codes = codebook->nearest(tokens.val());
      recon_pair[0] =
          mul_scalar(codebook->loss_toward_codes(t, tokens, out.token_codes), T(1) / static_cast<T>(b));
      if (!cfg.ema) {
        l2 = mul_scalar(codebook->loss_toward_tokens(t, tokens, out.token_codes),
                        T(1) / static_cast<T>(b));
        have_l2 = true;
      }
      Value<T> zq = codebook->quantize_st(t, tokens, out.token_codes);
      Value<T> dec = decoder->apply(t, zq);
      Value<T> diff = sub(dec, patches);
      recon_pair[1] = mul_scalar(sum_all(mul(diff, diff)), T(1) / static_cast<T>(b));
      reason_tokens = zq;
    }

    Value<T> grid_tokens = reshape(reason_tokens, {b, 16, n, d});
    Value<T> ctx = slice_axis(grid_tokens, 1, 0, 8);
    Value<T> cell9 = reshape(slice_axis(grid_tokens, 1, 8, 8), {b, 8, n, 1, d});
    ReasonerOut<T> r = reasoner->apply(t, ctx, cell9);
    out.scores = r.scores.val();

    std::vector<int64_t> answers;
    answers.reserve(batch.size());
    for (const Instance* inst : batch) answers.push_back(inst->answer);

    Value<T> total = choice_loss(t, r.scores, answers);
    out.terms["loss_choice"] = total.val()[0];

    if (codebook != nullptr) {
      out.terms["loss_toward_codes"] = recon_pair[0].val()[0];
      total = add(total, recon_pair[0]);
      if (have_l2) {
        out.terms["loss_toward_tokens"] = l2.val()[0];
        total = add(total, mul_scalar(l2, T(cfg.lambda_toward_tokens)));
      }
      out.terms["loss_recon"] = recon_pair[1].val()[0];
      total = add(total, recon_pair[1]);
    }

    if (cfg.act == Act::act3 && component_stage_active) {
      Value<T> bank = reshape(codebook->table.use(t), {1, cfg.k, 1, 1, d});
      ReasonerOut<T> rk = reasoner->apply(t, ctx, broadcast_to(bank, {b, cfg.k, n, 1, d}));
      std::vector<int64_t> targets;
      targets.reserve(static_cast<size_t>(b * n));
      for (int64_t i = 0; i < b; ++i) {
        int64_t base = (i * 16 + 8 + answers[static_cast<size_t>(i)]) * n;
        for (int64_t j = 0; j < n; ++j) targets.push_back(out.token_codes[static_cast<size_t>(base + j)]);
      }
      Value<T> l4 = component_choice_loss(t, rk.per_slot, targets, cfg.tau_components);
      out.terms["loss_component"] = l4.val()[0];
      total = add(total, l4);
    }

    if (meta != nullptr) {
      std::vector<std::array<int64_t, 2>> labels;
      labels.reserve(batch.size());
      for (const Instance* inst : batch) labels.push_back(directive_labels(inst->rules));
      Value<T> l5 = meta->loss(t, r.ctx_patterns, labels);
      out.terms["loss_align"] = l5.val()[0];
      total = add(total, l5);
      out.terms["alignment_acc"] =
          meta->alignment_accuracy(meta->row_queries(t, r.ctx_patterns).val(), labels);
    }

    out.terms["loss"] = total.val()[0];
    out.total = total;
    return out;
  }

  // Scores options without building gradients.
  Tensor<T> score_options(const std::vector<const Instance*>& batch) {
    Tape<T> t;
    t.set_grad_enabled(false);
    BatchResult<T> r = forward(t, batch, false);
    reg.detach_all();
    return r.scores;
  }
};

// ---------------------------------------------------------------------------
// checkpoint glue
// ---------------------------------------------------------------------------

template <typename T>
NamedTensors model_tensors(const SolverModel<T>& m) {
  NamedTensors nt;
  for (const Parameter<T>* p : m.reg.params())
    nt.add(p->name, p->value.template cast<float>());
  if (m.codebook != nullptr) m.codebook->stats_to(nt, "codebook");
  return nt;
}

template <typename T>
void save_model(const SolverModel<T>& m, const std::string& path) {
  save_tensors(path, model_tensors(m));
}

template <typename T>
void load_model(SolverModel<T>& m, const std::string& path) {
  NamedTensors nt = load_tensors(path);
  for (Parameter<T>* p : m.reg.params()) {
    const Tensor<float>* t = nt.find(p->name);
    if (t == nullptr) throw FormatError("checkpoint is missing " + p->name);
    if (t->shape != p->value.shape)
      throw FormatError("checkpoint shape mismatch for " + p->name + ": " +
                        shape_str(t->shape) + " vs " + shape_str(p->value.shape));
    p->value = t->template cast<T>();
    p->detach();
  }
  if (m.codebook != nullptr) m.codebook->stats_from(nt, "codebook");
}

// ---------------------------------------------------------------------------
// answer synthesis from the component bank
// ---------------------------------------------------------------------------

struct GeneratedAnswer {
  std::vector<uint8_t> image;        // h*w panel
  std::vector<int64_t> slot_codes;   // chosen component per slot
  int nearest_option = -1;           // option panel closest to the synthesis
  std::vector<double> option_dists;  // squared pixel distance per option
};

// Picks one component per slot from the component scores (argmax, or softmax
// sampling at temperature tau_gen when sample is set), decodes the assembled
// token grid to pixels, and reports the nearest option panel.
template <typename T>
GeneratedAnswer generate_answer(SolverModel<T>& m, const Instance& inst, bool sample = false,
                                double tau_gen = 0.01, uint64_t seed = 0) {
  if (m.codebook == nullptr)
    throw MissingCodebookError("activity " + std::string(act_name(m.cfg.act)) +
                               " trains no component bank");
  int64_t n = m.cfg.extractor_config().n_tokens(), d = m.cfg.d, k = m.cfg.k;
  Tape<T> t;
  t.set_grad_enabled(false);

  std::vector<const Instance*> one = {&inst};
  Value<T> patches = t.constant(m.batch_patches(one));
  Value<T> tokens = m.extractor->apply(t, patches);
  std::vector<int64_t> codes = m.codebook->nearest(tokens.val());
  Value<T> zq = m.codebook->quantize_st(t, tokens, codes);
  Value<T> grid_tokens = reshape(zq, {1, 16, n, d});
  Value<T> ctx = slice_axis(grid_tokens, 1, 0, 8);
  Value<T> bank = reshape(m.codebook->table.use(t), {1, k, 1, 1, d});
  ReasonerOut<T> rk = m.reasoner->apply(t, ctx, broadcast_to(bank, {1, k, n, 1, d}));
  const Tensor<T>& per_slot = rk.per_slot.val();  // [1, K, N]

  GeneratedAnswer out;
  Rng rng(Rng::mix(seed, 0x67656e));
  for (int64_t j = 0; j < n; ++j) {
    if (!sample) {
      int64_t best = 0;
      for (int64_t c = 1; c < k; ++c)
        if (per_slot[c * n + j] > per_slot[best * n + j]) best = c;
      out.slot_codes.push_back(best);
    } else {
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t c = 0; c < k; ++c)
        mx = std::max(mx, static_cast<double>(per_slot[c * n + j]));
      std::vector<double> p(static_cast<size_t>(k));
      double z = 0;
      for (int64_t c = 0; c < k; ++c) {
        p[static_cast<size_t>(c)] = std::exp((per_slot[c * n + j] - mx) / tau_gen);
        z += p[static_cast<size_t>(c)];
      }
      double u = rng.next_double() * z, acc = 0;
      int64_t pick = k - 1;
      for (int64_t c = 0; c < k; ++c) {
        acc += p[static_cast<size_t>(c)];
        if (u < acc) {
          pick = c;
          break;
        }
      }
      out.slot_codes.push_back(pick);
    }
  }

  Value<T> chosen = index_select(m.codebook->table.use(t), 0, out.slot_codes);
  Value<T> dec = m.decoder->apply(t, reshape(chosen, {1, n, d}));
  out.image = unpatchify(dec.val(), m.cfg.img_h, m.cfg.img_w, m.cfg.patch);
  m.reg.detach_all();

  size_t panel = static_cast<size_t>(m.cfg.img_h) * static_cast<size_t>(m.cfg.img_w);
  out.option_dists.resize(8);
  for (int o = 0; o < 8; ++o) {
    const uint8_t* opt = inst.pixels.data() + (8 + o) * panel;
    double dist = 0;
    for (size_t px = 0; px < panel; ++px) {
      double df = static_cast<double>(out.image[px]) - static_cast<double>(opt[px]);
      dist += df * df;
    }
    out.option_dists[static_cast<size_t>(o)] = dist;
    if (out.nearest_option < 0 || dist < out.option_dists[static_cast<size_t>(out.nearest_option)])
      out.nearest_option = o;
  }
  return out;
}

}  // namespace rpmlab
