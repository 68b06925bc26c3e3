// trainer.hpp -- Adam, the training loop, and evaluation.
//
// Config precedence: built-in defaults, then JSON config file, then CLI
// overrides (the CLI merges its flags as a second JSON object), then the
// RPM_SEED environment variable.
#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "rpmlab/dataset.hpp"
#include "rpmlab/errors.hpp"
#include "rpmlab/generator.hpp"
#include "rpmlab/model.hpp"

namespace rpmlab {

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
 public:
  double lr = 3e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  Adam(SolverModel<T>& model, double lr_, double b1, double b2, double eps_)
      : lr(lr_), beta1(b1), beta2(b2), eps(eps_) {
    for (Parameter<T>* p : model.reg.params()) {
      if (model.optimizer_skips(p)) continue;
      params_.push_back(p);
      m_.emplace_back(p->value.shape);
      v_.emplace_back(p->value.shape);
    }
  }

  void step() {
    ++t_;
    double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    double rate = lr * std::sqrt(c2) / c1;
    for (size_t i = 0; i < params_.size(); ++i) {
      Parameter<T>& p = *params_[i];
      T* w = p.value.ptr();
      const T* g = p.grad.ptr();
      T* m = m_[i].ptr();
      T* v = v_[i].ptr();
      int64_t n = p.value.numel();
      for (int64_t j = 0; j < n; ++j) {
        double gj = g[j];
        double mj = beta1 * m[j] + (1.0 - beta1) * gj;
        double vj = beta2 * v[j] + (1.0 - beta2) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        w[j] = static_cast<T>(w[j] - rate * mj / (std::sqrt(vj) + eps));
      }
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<Tensor<T>> m_, v_;
  int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

struct DataConfig {
  Mode mode = Mode::raven_like;
  uint64_t data_seed = 1;
  int64_t train_count = 5000;
  int64_t val_count = 1000;
  bool impoverish = false;
  std::vector<Rule> allowed_rules;  // empty means all four
  std::string train_path;           // when set, load instead of generating
  std::string val_path;
};

struct TrainConfig {
  ModelConfig model;
  DataConfig data;
  int64_t epochs = 10;
  int64_t batch_size = 32;
  double lr = 3e-4, beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  uint64_t seed = 7;
  int64_t log_every = 25;
  std::string checkpoint;  // best-validation checkpoint path; empty disables
};

namespace detail {

template <typename V>
void take(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace detail

// Merges the keys present in j over cfg; unknown keys raise ConfigError.
inline void merge_config(TrainConfig& cfg, const nlohmann::json& j) {
  static const std::set<std::string> top = {"model", "data", "train"};
  static const std::set<std::string> model_keys = {
      "img", "patch", "d", "heads", "layers", "ffn_mult", "d_p", "k", "ema",
      "gamma", "dead_window", "act", "lambda_toward_tokens", "tau_components",
      "stage_fraction"};
  static const std::set<std::string> data_keys = {
      "mode", "data_seed", "train_count", "val_count", "impoverish",
      "allowed_rules", "train_path", "val_path"};
  static const std::set<std::string> train_keys = {
      "epochs", "batch_size", "lr", "beta1", "beta2", "adam_eps", "seed",
      "log_every", "checkpoint"};

  for (const auto& [key, val] : j.items()) {
    if (!top.count(key)) throw ConfigError("unknown config section: " + key);
    const std::set<std::string>& allowed =
        key == "model" ? model_keys : key == "data" ? data_keys : train_keys;
    for (const auto& [inner, unused] : val.items()) {
      (void)unused;
      if (!allowed.count(inner))
        throw ConfigError("unknown config key: " + key + "." + inner);
    }
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    if (m.contains("img")) {
      cfg.model.img_h = m.at("img").get<int64_t>();
      cfg.model.img_w = cfg.model.img_h;
    }
    detail::take(m, "patch", cfg.model.patch);
    detail::take(m, "d", cfg.model.d);
    detail::take(m, "heads", cfg.model.heads);
    detail::take(m, "layers", cfg.model.layers);
    detail::take(m, "ffn_mult", cfg.model.ffn_mult);
    detail::take(m, "d_p", cfg.model.d_p);
    detail::take(m, "k", cfg.model.k);
    detail::take(m, "ema", cfg.model.ema);
    detail::take(m, "gamma", cfg.model.gamma);
    detail::take(m, "dead_window", cfg.model.dead_window);
    if (m.contains("act")) cfg.model.act = act_from_string(m.at("act").get<std::string>());
    detail::take(m, "lambda_toward_tokens", cfg.model.lambda_toward_tokens);
    detail::take(m, "tau_components", cfg.model.tau_components);
    detail::take(m, "stage_fraction", cfg.model.stage_fraction);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    if (d.contains("mode")) cfg.data.mode = mode_from_string(d.at("mode").get<std::string>());
    detail::take(d, "data_seed", cfg.data.data_seed);
    detail::take(d, "train_count", cfg.data.train_count);
    detail::take(d, "val_count", cfg.data.val_count);
    detail::take(d, "impoverish", cfg.data.impoverish);
    if (d.contains("allowed_rules")) {
      cfg.data.allowed_rules.clear();
      for (const auto& r : d.at("allowed_rules"))
        cfg.data.allowed_rules.push_back(rule_from_string(r.get<std::string>()));
    }
    detail::take(d, "train_path", cfg.data.train_path);
    detail::take(d, "val_path", cfg.data.val_path);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::take(t, "epochs", cfg.epochs);
    detail::take(t, "batch_size", cfg.batch_size);
    detail::take(t, "lr", cfg.lr);
    detail::take(t, "beta1", cfg.beta1);
    detail::take(t, "beta2", cfg.beta2);
    detail::take(t, "adam_eps", cfg.adam_eps);
    detail::take(t, "seed", cfg.seed);
    detail::take(t, "log_every", cfg.log_every);
    detail::take(t, "checkpoint", cfg.checkpoint);
  }
}

inline void merge_config_file(TrainConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  in >> j;
  merge_config(cfg, j);
}

// RPM_SEED wins over every other seed source.
inline void apply_env_seed(TrainConfig& cfg) {
  const char* s = std::getenv("RPM_SEED");
  if (s == nullptr || *s == '\0') return;
  char* end = nullptr;
  unsigned long long v = std::strtoull(s, &end, 10);
  if (end == s || *end != '\0') throw ConfigError("RPM_SEED is not an integer: " + std::string(s));
  cfg.seed = static_cast<uint64_t>(v);
}

// ---------------------------------------------------------------------------
// data plumbing
// ---------------------------------------------------------------------------

inline GenConfig gen_config_for(const DataConfig& d, const ModelConfig& m, uint64_t seed_offset) {
  GenConfig g;
  g.mode = d.mode;
  g.seed = Rng::mix(d.data_seed, seed_offset);
  g.img_h = static_cast<int>(m.img_h);
  g.impoverish = d.impoverish;
  g.allowed_rules = d.allowed_rules;
  return g;
}

// Loads the split from its path when given, otherwise generates it. Train and
// val use disjoint seed streams.
inline std::vector<Instance> build_split(const DataConfig& d, const ModelConfig& m, bool train) {
  const std::string& path = train ? d.train_path : d.val_path;
  if (!path.empty()) return read_rpmb(path);
  return generate_dataset(gen_config_for(d, m, train ? 0x7472u : 0x76616cu),
                          static_cast<uint64_t>(train ? d.train_count : d.val_count));
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvalRow {
  int64_t id;
  std::array<double, 8> scores;
  int pred;
  int answer;
};

template <typename T>
double evaluate(SolverModel<T>& model, const std::vector<Instance>& set, int64_t batch_size,
                std::vector<EvalRow>* rows = nullptr) {
  if (set.empty()) throw DataError("evaluation set is empty");
  int64_t hits = 0;
  for (size_t at = 0; at < set.size(); at += static_cast<size_t>(batch_size)) {
    size_t stop = std::min(set.size(), at + static_cast<size_t>(batch_size));
    std::vector<const Instance*> batch;
    for (size_t i = at; i < stop; ++i) batch.push_back(&set[i]);
    Tensor<T> scores = model.score_options(batch);
    for (size_t i = 0; i < batch.size(); ++i) {
      int pred = 0;
      for (int o = 1; o < 8; ++o)
        if (scores[static_cast<int64_t>(i) * 8 + o] > scores[static_cast<int64_t>(i) * 8 + pred])
          pred = o;
      hits += pred == batch[i]->answer ? 1 : 0;
      if (rows != nullptr) {
        EvalRow row;
        row.id = static_cast<int64_t>(at + i);
        for (int o = 0; o < 8; ++o)
          row.scores[static_cast<size_t>(o)] = scores[static_cast<int64_t>(i) * 8 + o];
        row.pred = pred;
        row.answer = batch[i]->answer;
        rows->push_back(row);
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(set.size());
}

// Mean directive-recovery rate over a dataset; needs a metadata head.
template <typename T>
double evaluate_alignment(SolverModel<T>& model, const std::vector<Instance>& set,
                          int64_t batch_size) {
  if (model.meta == nullptr) throw ConfigError("model trains no metadata head");
  if (set.empty()) throw DataError("evaluation set is empty");
  double weighted = 0;
  for (size_t at = 0; at < set.size(); at += static_cast<size_t>(batch_size)) {
    size_t stop = std::min(set.size(), at + static_cast<size_t>(batch_size));
    std::vector<const Instance*> batch;
    for (size_t i = at; i < stop; ++i) batch.push_back(&set[i]);
    Tape<T> t;
    t.set_grad_enabled(false);
    BatchResult<T> r = model.forward(t, batch, false);
    model.reg.detach_all();
    weighted += r.terms.at("alignment_acc") * static_cast<double>(batch.size());
  }
  return weighted / static_cast<double>(set.size());
}

inline void write_eval_jsonl(std::ostream& out, const std::vector<EvalRow>& rows) {
  for (const EvalRow& r : rows) {
    nlohmann::json j;
    j["id"] = r.id;
    j["scores"] = r.scores;
    j["pred"] = r.pred;
    j["answer"] = r.answer;
    out << j.dump() << "\n";
  }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct TrainResult {
  int64_t steps = 0;
  double best_val_acc = 0.0;
  int64_t best_epoch = -1;
  double final_val_acc = 0.0;
};

// Runs the full schedule: seeded shuffling, the activity's composite loss,
// Adam, EMA codebook maintenance, staged component supervision, per-epoch
// validation, and best-checkpoint saving. Metrics go to `metrics` as JSON
// lines when non-null. Throws DivergenceError on the first non-finite loss.
template <typename T>
TrainResult train(SolverModel<T>& model, const std::vector<Instance>& train_set,
                  const std::vector<Instance>& val_set, const TrainConfig& tc,
                  std::ostream* metrics = nullptr) {
  if (train_set.empty()) throw DataError("training set is empty");
  Adam<T> opt(model, tc.lr, tc.beta1, tc.beta2, tc.adam_eps);
  Rng shuffle_rng(Rng::mix(tc.seed, 0x73687566u));
  Rng ema_rng(Rng::mix(tc.seed, 0x656d61u));

  int64_t steps_per_epoch =
      (static_cast<int64_t>(train_set.size()) + tc.batch_size - 1) / tc.batch_size;
  int64_t total_steps = steps_per_epoch * tc.epochs;
  int64_t stage_at = static_cast<int64_t>(model.cfg.stage_fraction * static_cast<double>(total_steps));

  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  auto t0 = std::chrono::steady_clock::now();
  auto wall_s = [&t0] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  TrainResult result;
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(shuffle_rng.uniform_int(static_cast<int64_t>(i)));
      std::swap(order[i - 1], order[j]);
    }

    for (int64_t sb = 0; sb < steps_per_epoch; ++sb, ++step) {
      size_t at = static_cast<size_t>(sb * tc.batch_size);
      size_t stop = std::min(train_set.size(), at + static_cast<size_t>(tc.batch_size));
      std::vector<const Instance*> batch;
      for (size_t i = at; i < stop; ++i) batch.push_back(&train_set[order[i]]);

      Tape<T> tape;
      bool staged = model.cfg.act == Act::act3 && step >= stage_at;
      BatchResult<T> fb = model.forward(tape, batch, staged);
      if (!std::isfinite(static_cast<double>(fb.total.val()[0])))
        throw DivergenceError("training loss became non-finite", step);
      tape.backward(fb.total);
      model.reg.collect_grads();
      model.reg.detach_all();
      opt.step();
      if (model.codebook != nullptr && model.cfg.ema)
        model.codebook->ema_update(fb.raw_tokens, fb.token_codes, ema_rng);

      if (metrics != nullptr && (step % tc.log_every == 0 || step + 1 == total_steps)) {
        nlohmann::json j;
        j["step"] = step;
        j["epoch"] = epoch;
        for (const auto& [k, v] : fb.terms) j[k] = v;
        if (model.codebook != nullptr) j["live_components"] = model.codebook->live_components();
        j["staged"] = staged;
        j["wall_s"] = wall_s();
        *metrics << j.dump() << "\n";
      }
    }

    if (!val_set.empty()) {
      double acc = evaluate(model, val_set, tc.batch_size);
      result.final_val_acc = acc;
      if (acc > result.best_val_acc || result.best_epoch < 0) {
        result.best_val_acc = acc;
        result.best_epoch = epoch;
        if (!tc.checkpoint.empty()) save_model(model, tc.checkpoint);
      }
      if (metrics != nullptr) {
        nlohmann::json j;
        j["step"] = step;
        j["epoch"] = epoch;
        j["val_acc"] = acc;
        if (model.codebook != nullptr) j["live_components"] = model.codebook->live_components();
        j["wall_s"] = wall_s();
        *metrics << j.dump() << "\n";
        metrics->flush();
      }
    }
  }
  result.steps = step;
  return result;
}

}  // namespace rpmlab
