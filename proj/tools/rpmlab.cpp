// rpmlab.cpp -- command line entry point.
//
// Subcommands: gen, train, eval, inspect, bench, generate-answer. Training
// and evaluation run in 32-bit; config precedence is defaults, then --config
// JSON, then explicit flags, then RPM_SEED.
#include <chrono>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rpmlab/spin.hpp"
#include "rpmlab/trainer.hpp"

using namespace rpmlab;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// shared config plumbing
// ---------------------------------------------------------------------------

struct ConfigArgs {
  std::string config_path;
  std::string act, mode;
  std::vector<std::string> rules;
  int64_t img = 0, patch = 0, d = 0, heads = 0, layers = 0, ffn_mult = 0, d_p = 0, k = 0;
  int64_t dead_window = 0, epochs = 0, batch_size = 0, log_every = 0;
  int64_t train_count = 0, val_count = 0;
  uint64_t seed = 0, data_seed = 0;
  double lr = 0, gamma = 0, lambda_toward_tokens = 0, tau_components = 0, stage_fraction = 0;
  bool ema = false, no_ema = false, impoverish = false;
  std::string train_path, val_path, checkpoint;
};

// Every flag is registered against `ca`; flags the user actually passed are
// folded into a JSON object afterwards so they override the --config file.
void add_config_flags(CLI::App* cmd, ConfigArgs& ca) {
  cmd->add_option("--config", ca.config_path, "JSON config file");
  cmd->add_option("--act", ca.act, "activity: act1|act2|act3|act4|act4_straw|meta");
  cmd->add_option("--mode", ca.mode, "puzzle mode: raven_like|pgm_like");
  cmd->add_option("--rules", ca.rules, "allowed rule kinds (comma separated)")->delimiter(',');
  cmd->add_option("--img", ca.img, "panel side in pixels");
  cmd->add_option("--patch", ca.patch, "patch side in pixels");
  cmd->add_option("--d", ca.d, "token width");
  cmd->add_option("--heads", ca.heads, "attention heads");
  cmd->add_option("--layers", ca.layers, "encoder layers");
  cmd->add_option("--ffn-mult", ca.ffn_mult, "feed-forward width multiplier");
  cmd->add_option("--d-p", ca.d_p, "pattern width");
  cmd->add_option("--k", ca.k, "codebook components");
  cmd->add_flag("--ema", ca.ema, "maintain the code table by moving averages");
  cmd->add_flag("--no-ema", ca.no_ema, "train the code table by gradient");
  cmd->add_option("--gamma", ca.gamma, "EMA decay");
  cmd->add_option("--dead-window", ca.dead_window, "starvation window before re-seeding");
  cmd->add_option("--lambda-toward-tokens", ca.lambda_toward_tokens, "commitment weight");
  cmd->add_option("--tau-components", ca.tau_components, "component score temperature");
  cmd->add_option("--stage-fraction", ca.stage_fraction, "step fraction before component loss");
  cmd->add_option("--data-seed", ca.data_seed, "generation seed");
  cmd->add_option("--train-count", ca.train_count, "generated training instances");
  cmd->add_option("--val-count", ca.val_count, "generated validation instances");
  cmd->add_flag("--impoverish", ca.impoverish, "single-attribute distractors");
  cmd->add_option("--train-path", ca.train_path, "load the training split from this file");
  cmd->add_option("--val-path", ca.val_path, "load the validation split from this file");
  cmd->add_option("--epochs", ca.epochs, "training epochs");
  cmd->add_option("--batch-size", ca.batch_size, "batch size");
  cmd->add_option("--lr", ca.lr, "learning rate");
  cmd->add_option("--seed", ca.seed, "training seed");
  cmd->add_option("--log-every", ca.log_every, "steps between metric records");
  cmd->add_option("--checkpoint", ca.checkpoint, "best-validation checkpoint path");
}

TrainConfig resolve_config(const CLI::App* cmd, const ConfigArgs& ca) {
  json ov;
  auto set = [&](const char* flag, const char* section, const char* key, auto value) {
    if (cmd->count(flag) > 0) ov[section][key] = value;
  };
  set("--act", "model", "act", ca.act);
  set("--img", "model", "img", ca.img);
  set("--patch", "model", "patch", ca.patch);
  set("--d", "model", "d", ca.d);
  set("--heads", "model", "heads", ca.heads);
  set("--layers", "model", "layers", ca.layers);
  set("--ffn-mult", "model", "ffn_mult", ca.ffn_mult);
  set("--d-p", "model", "d_p", ca.d_p);
  set("--k", "model", "k", ca.k);
  set("--ema", "model", "ema", true);
  set("--no-ema", "model", "ema", false);
  set("--gamma", "model", "gamma", ca.gamma);
  set("--dead-window", "model", "dead_window", ca.dead_window);
  set("--lambda-toward-tokens", "model", "lambda_toward_tokens", ca.lambda_toward_tokens);
  set("--tau-components", "model", "tau_components", ca.tau_components);
  set("--stage-fraction", "model", "stage_fraction", ca.stage_fraction);
  set("--mode", "data", "mode", ca.mode);
  set("--rules", "data", "allowed_rules", ca.rules);
  set("--data-seed", "data", "data_seed", ca.data_seed);
  set("--train-count", "data", "train_count", ca.train_count);
  set("--val-count", "data", "val_count", ca.val_count);
  set("--impoverish", "data", "impoverish", true);
  set("--train-path", "data", "train_path", ca.train_path);
  set("--val-path", "data", "val_path", ca.val_path);
  set("--epochs", "train", "epochs", ca.epochs);
  set("--batch-size", "train", "batch_size", ca.batch_size);
  set("--lr", "train", "lr", ca.lr);
  set("--seed", "train", "seed", ca.seed);
  set("--log-every", "train", "log_every", ca.log_every);
  set("--checkpoint", "train", "checkpoint", ca.checkpoint);

  TrainConfig cfg;
  if (!ca.config_path.empty()) merge_config_file(cfg, ca.config_path);
  merge_config(cfg, ov);
  apply_env_seed(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

int run_gen(Mode mode, uint64_t count, int size, bool impoverish,
            const std::vector<std::string>& rules, uint64_t seed, const std::string& out) {
  GenConfig g;
  g.mode = mode;
  g.seed = seed;
  g.img_h = size;
  g.impoverish = impoverish;
  for (const std::string& r : rules) g.allowed_rules.push_back(rule_from_string(r));
  std::vector<Instance> data = generate_dataset(g, count);
  write_rpmb(out, data);
  json j;
  j["count"] = data.size();
  j["mode"] = mode_name(mode);
  j["out"] = out;
  std::cout << j.dump() << "\n";
  return 0;
}

int run_train(const TrainConfig& cfg, const std::string& metrics_path) {
  std::vector<Instance> train_set = build_split(cfg.data, cfg.model, true);
  std::vector<Instance> val_set = build_split(cfg.data, cfg.model, false);

  SolverModel<float> model(cfg.model);
  model.init_params(cfg.seed);

  std::ofstream metrics_file;
  std::ostream* metrics = nullptr;
  if (!metrics_path.empty()) {
    metrics_file.open(metrics_path);
    if (!metrics_file) throw ConfigError("cannot open metrics file: " + metrics_path);
    metrics = &metrics_file;
  }

  TrainResult r = train(model, train_set, val_set, cfg, metrics);
  json j;
  j["steps"] = r.steps;
  j["best_val_acc"] = r.best_val_acc;
  j["best_epoch"] = r.best_epoch;
  j["final_val_acc"] = r.final_val_acc;
  if (!cfg.checkpoint.empty()) j["checkpoint"] = cfg.checkpoint;
  std::cout << j.dump() << "\n";
  return 0;
}

int run_eval(const TrainConfig& cfg, const std::string& ckpt, const std::string& data_path,
             const std::string& out_path) {
  SolverModel<float> model(cfg.model);
  model.init_params(cfg.seed);
  load_model(model, ckpt);

  std::vector<Instance> set =
      data_path.empty() ? build_split(cfg.data, cfg.model, false) : read_rpmb(data_path);
  std::vector<EvalRow> rows;
  double acc = evaluate(model, set, cfg.batch_size, &rows);
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw ConfigError("cannot open output file: " + out_path);
    write_eval_jsonl(out, rows);
  }
  json j;
  j["accuracy"] = acc;
  j["count"] = set.size();
  if (model.meta != nullptr) j["alignment_accuracy"] = evaluate_alignment(model, set, cfg.batch_size);
  std::cout << j.dump() << "\n";
  return 0;
}

int run_inspect(const std::string& ckpt, bool codebook) {
  NamedTensors nt = load_tensors(ckpt);
  if (!codebook) {
    std::cout << "name,shape,count\n";
    for (const auto& [name, t] : nt.items)
      std::cout << name << "," << shape_str(t.shape) << "," << t.numel() << "\n";
    return 0;
  }
  const Tensor<float>* usage = nt.find("codebook.usage");
  const Tensor<float>* unused = nt.find("codebook.unused_steps");
  const Tensor<float>* count = nt.find("codebook.ema_count");
  if (usage == nullptr || unused == nullptr || count == nullptr)
    throw FormatError("checkpoint carries no codebook statistics: " + ckpt);
  std::cout << "component,usage,unused_steps,ema_count\n";
  for (int64_t i = 0; i < usage->numel(); ++i)
    std::cout << i << "," << (*usage)[i] << "," << (*unused)[i] << "," << (*count)[i] << "\n";
  return 0;
}

int run_bench(const std::string& block, int64_t n, int64_t d, int64_t heads, int64_t layers,
              int64_t batch, int64_t reps) {
  Registry<float> reg;
  SpinTransformer<float> enc(reg, "enc", layers, n, d, heads, 4 * d, block == "straw");
  reg.init_all(1);

  Rng rng(2);
  Tensor<float> x = tensor_uniform<float>({batch, n, d}, rng, -1.0f, 1.0f);
  using clock = std::chrono::steady_clock;
  auto ms_since = [](clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  };

  // warm one pass of each, then time the loops
  {
    Tape<float> t;
    t.set_grad_enabled(false);
    enc.apply(t, t.constant(x));
    reg.detach_all();
  }
  auto t0 = clock::now();
  for (int64_t i = 0; i < reps; ++i) {
    Tape<float> t;
    t.set_grad_enabled(false);
    enc.apply(t, t.constant(x));
    reg.detach_all();
  }
  double fwd_ms = ms_since(t0) / static_cast<double>(reps);

  double bwd_ms = 0;
  for (int64_t i = 0; i < reps + 1; ++i) {
    Tape<float> t;
    Value<float> out = sum_all(enc.apply(t, t.constant(x)));
    auto t1 = clock::now();
    t.backward(out);
    if (i > 0) bwd_ms += ms_since(t1);  // skip the warm-up pass
    reg.collect_grads();
    reg.detach_all();
  }
  bwd_ms /= static_cast<double>(reps);

  std::cout << "block,n_tokens,d,heads,layers,params,fwd_ms,bwd_ms\n";
  std::cout << block << "," << n << "," << d << "," << heads << "," << layers << ","
            << reg.total_count() << "," << fwd_ms << "," << bwd_ms << "\n";
  return 0;
}

int run_generate(const TrainConfig& cfg, const std::string& ckpt, const std::string& data_path,
                 uint64_t index, bool sample, double tau, uint64_t seed,
                 const std::string& out_path) {
  SolverModel<float> model(cfg.model);
  model.init_params(cfg.seed);
  load_model(model, ckpt);

  std::vector<Instance> set =
      data_path.empty() ? build_split(cfg.data, cfg.model, false) : read_rpmb(data_path);
  if (index >= set.size()) throw DataError("instance index out of range");
  const Instance& inst = set[index];

  GeneratedAnswer g = generate_answer(model, inst, sample, tau, seed);
  if (!out_path.empty()) {
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw ConfigError("cannot open output file: " + out_path);
    out << "P5\n" << inst.w << " " << inst.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(g.image.data()),
              static_cast<std::streamsize>(g.image.size()));
  }
  json j;
  j["slot_codes"] = g.slot_codes;
  j["nearest_option"] = g.nearest_option;
  j["option_dists"] = g.option_dists;
  j["answer"] = inst.answer;
  if (!out_path.empty()) j["out"] = out_path;
  std::cout << j.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale matrix-puzzle solver"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "generate a puzzle dataset");
  std::string gen_mode = "raven_like", gen_out;
  std::vector<std::string> gen_rules;
  uint64_t gen_count = 1000, gen_seed = 1;
  int gen_size = 32;
  bool gen_impoverish = false;
  gen->add_option("--mode", gen_mode, "raven_like|pgm_like");
  gen->add_option("--count", gen_count, "instances to generate");
  gen->add_option("--size", gen_size, "panel side in pixels");
  gen->add_flag("--impoverish", gen_impoverish, "single-attribute distractors");
  gen->add_option("--rules", gen_rules, "allowed rule kinds")->delimiter(',');
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--out", gen_out, "output .rpmb path")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  ConfigArgs tr_args;
  std::string tr_metrics;
  add_config_flags(tr, tr_args);
  tr->add_option("--metrics", tr_metrics, "metrics JSONL path");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ConfigArgs ev_args;
  std::string ev_ckpt, ev_data, ev_out;
  add_config_flags(ev, ev_args);
  ev->add_option("--load", ev_ckpt, "checkpoint to evaluate")->required();
  ev->add_option("--data", ev_data, "evaluation .rpmb (default: the config's val split)");
  ev->add_option("--out", ev_out, "per-instance predictions JSONL path");

  // inspect
  auto* in = app.add_subcommand("inspect", "list checkpoint contents as CSV");
  std::string in_ckpt;
  bool in_codebook = false;
  in->add_option("--load", in_ckpt, "checkpoint to inspect")->required();
  in->add_flag("--codebook", in_codebook, "print per-component usage statistics");

  // bench
  auto* be = app.add_subcommand("bench", "time one backbone stack as CSV");
  std::string be_block = "spin";
  int64_t be_n = 16, be_d = 64, be_heads = 4, be_layers = 2, be_batch = 32, be_reps = 10;
  be->add_option("--block", be_block, "spin|straw")
      ->check(CLI::IsMember({"spin", "straw"}));
  be->add_option("--n-tokens", be_n, "sequence length");
  be->add_option("--d", be_d, "token width");
  be->add_option("--heads", be_heads, "attention heads");
  be->add_option("--layers", be_layers, "stacked blocks");
  be->add_option("--batch", be_batch, "batch size");
  be->add_option("--reps", be_reps, "timed repetitions");

  // generate-answer
  auto* ga = app.add_subcommand("generate-answer", "synthesize the missing panel");
  ConfigArgs ga_args;
  std::string ga_ckpt, ga_data, ga_out;
  uint64_t ga_index = 0, ga_seed = 0;
  double ga_tau = 0.01;
  bool ga_sample = false;
  add_config_flags(ga, ga_args);
  ga->add_option("--load", ga_ckpt, "trained checkpoint")->required();
  ga->add_option("--data", ga_data, "instance source .rpmb (default: the config's val split)");
  ga->add_option("--index", ga_index, "instance index");
  ga->add_flag("--sample", ga_sample, "sample components instead of argmax");
  ga->add_option("--tau", ga_tau, "sampling temperature");
  ga->add_option("--gen-seed", ga_seed, "sampling seed");
  ga->add_option("--out", ga_out, "output .pgm path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return run_gen(mode_from_string(gen_mode), gen_count, gen_size, gen_impoverish, gen_rules,
                     gen_seed, gen_out);
    if (tr->parsed()) return run_train(resolve_config(tr, tr_args), tr_metrics);
    if (ev->parsed()) return run_eval(resolve_config(ev, ev_args), ev_ckpt, ev_data, ev_out);
    if (in->parsed()) return run_inspect(in_ckpt, in_codebook);
    if (be->parsed()) return run_bench(be_block, be_n, be_d, be_heads, be_layers, be_batch, be_reps);
    if (ga->parsed())
      return run_generate(resolve_config(ga, ga_args), ga_ckpt, ga_data, ga_index, ga_sample,
                          ga_tau, ga_seed, ga_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
