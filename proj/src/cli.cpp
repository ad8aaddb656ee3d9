#include "icsrec/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "icsrec/corpus.hpp"
#include "icsrec/encoder.hpp"
#include "icsrec/eval.hpp"
#include "icsrec/synth.hpp"
#include "icsrec/trainer.hpp"

namespace icsrec {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_config_file(const std::optional<std::string>& path) {
  if (!path) return json::object();
  std::ifstream in(*path, std::ios::binary);
  if (!in) throw InputError("config file not found: " + *path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InputError("config file " + *path + ": " + e.what());
  }
  if (!j.is_object()) throw InputError("config file " + *path + " must hold a JSON object");
  return j;
}

template <class T>
void put(json& j, const char* key, const std::optional<T>& value) {
  if (value) j[key] = *value;
}

void reject_unknown(const json& cfg, const std::set<std::string>& allowed, const std::string& command) {
  for (const auto& [key, value] : cfg.items()) {
    if (!allowed.contains(key)) throw InputError("unknown " + command + " config key '" + key + "'");
  }
}

template <class T>
T take(json& cfg, const std::string& key, T fallback) {
  if (!cfg.contains(key)) return fallback;
  try {
    T v = cfg.at(key).get<T>();
    cfg.erase(key);
    return v;
  } catch (const json::exception& e) {
    throw InputError("config key '" + key + "': " + e.what());
  }
}

std::string require(json& cfg, const std::string& key, const std::string& flag) {
  const auto v = take<std::string>(cfg, key, "");
  if (v.empty()) throw InputError(flag + " is required");
  return v;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void require_dataset(const fs::path& dir) {
  if (!fs::exists(dir / "sequences.txt")) throw InputError("no preprocessed dataset at " + dir.string());
}

fs::path resolve_checkpoint(const fs::path& path) {
  for (const fs::path& candidate : {path, path / "model", path / "best" / "model"}) {
    if (fs::exists(candidate / "manifest.json")) return candidate;
  }
  throw InputError("no checkpoint found at " + path.string());
}

Corpus load_compatible(const fs::path& data, const ModelParams& params) {
  require_dataset(data);
  Corpus corpus = read_dataset(data);
  if (corpus.item_count > params.shape().item_count) {
    throw InputError("dataset has " + std::to_string(corpus.item_count) + " items but the checkpoint covers " +
                     std::to_string(params.shape().item_count));
  }
  corpus.item_count = params.shape().item_count;
  return corpus;
}

// ---- preprocess --------------------------------------------------------------

struct PreprocessArgs {
  std::optional<std::string> config, input, output;
  std::optional<std::size_t> min_count;
};

void cmd_preprocess(const PreprocessArgs& a, std::ostream& out) {
  json cfg = load_config_file(a.config);
  put(cfg, "input", a.input);
  put(cfg, "output_dir", a.output);
  put(cfg, "min_count", a.min_count);
  reject_unknown(cfg, {"input", "output_dir", "min_count"}, "preprocess");
  json resolved = cfg;
  const fs::path input = require(cfg, "input", "--input");
  const fs::path output = require(cfg, "output_dir", "--output");
  const auto min_count = take<std::size_t>(cfg, "min_count", 5);
  resolved["min_count"] = min_count;
  if (!fs::exists(input)) throw InputError("input file not found: " + input.string());

  const Preprocessed pre = preprocess(load_interactions(input), min_count);
  write_dataset(output, pre.corpus, pre.id_map);
  resolved["command"] = "preprocess";
  write_json(output / "config.json", resolved);
  const CorpusStats st = compute_stats(pre.corpus);
  out << "users " << st.users << ", items " << st.items << ", actions " << st.actions << " -> " << output.string()
      << '\n';
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  std::optional<std::string> config, data, output, encoder, reduction;
  std::optional<std::size_t> d, n, batch_size, k, max_epochs, patience, cluster_iters, blocks, heads, ffn_dim;
  std::optional<double> lr, lambda, beta, tau, dropout, init_std, weight_decay, grad_clip;
  std::optional<std::uint64_t> seed;
  std::optional<bool> fnm, shared_pool, normalize, log_timing;
};

void cmd_train(const TrainArgs& a, std::ostream& out) {
  json cfg = load_config_file(a.config);
  put(cfg, "data_path", a.data);
  put(cfg, "output_dir", a.output);
  put(cfg, "log_timing", a.log_timing);
  put(cfg, "d", a.d);
  put(cfg, "n", a.n);
  put(cfg, "batch_size", a.batch_size);
  put(cfg, "lr", a.lr);
  put(cfg, "lambda", a.lambda);
  put(cfg, "beta", a.beta);
  put(cfg, "k", a.k);
  put(cfg, "tau", a.tau);
  put(cfg, "dropout", a.dropout);
  put(cfg, "max_epochs", a.max_epochs);
  put(cfg, "patience", a.patience);
  put(cfg, "seed", a.seed);
  put(cfg, "encoder_kind", a.encoder);
  put(cfg, "cluster_iters", a.cluster_iters);
  put(cfg, "blocks", a.blocks);
  put(cfg, "heads", a.heads);
  put(cfg, "ffn_dim", a.ffn_dim);
  put(cfg, "init_std", a.init_std);
  put(cfg, "weight_decay", a.weight_decay);
  put(cfg, "grad_clip", a.grad_clip);
  put(cfg, "contrastive_reduction", a.reduction);
  put(cfg, "false_negative_mask", a.fnm);
  put(cfg, "ficl_shared_pool", a.shared_pool);
  put(cfg, "normalize_prototypes", a.normalize);

  const fs::path data = require(cfg, "data_path", "--data");
  const fs::path output = require(cfg, "output_dir", "--output");
  const bool log_timing = take<bool>(cfg, "log_timing", false);
  const TrainConfig config = train_config_from_json(cfg);
  config.validate();
  require_dataset(data);
  const Corpus corpus = read_dataset(data);

  fs::create_directories(output);
  json resolved = to_json(config);
  resolved["command"] = "train";
  resolved["data_path"] = data.string();
  resolved["output_dir"] = output.string();
  resolved["log_timing"] = log_timing;
  write_json(output / "config.json", resolved);

  const std::string mode = config.backbone_only() ? "backbone" : "icsrec";
  out << "mode " << mode << " (lambda=" << config.lambda << ", beta=" << config.beta << "), encoder "
      << to_string(config.encoder_kind) << ", " << corpus.user_count() << " users, " << corpus.item_count
      << " items\n";

  std::ofstream log(output / "metrics.jsonl", std::ios::binary);
  if (!log) throw IoError("cannot write " + (output / "metrics.jsonl").string());
  FitOptions opts;
  opts.record_timing = log_timing;
  opts.diagnostic_dir = output / "diagnostic";
  opts.on_epoch = [&](const EpochRecord& r) {
    log << to_json(r).dump() << '\n';
    log.flush();
    out << "epoch " << r.epoch << " loss " << r.loss.total << " val ndcg@20 " << r.val_ndcg20 << '\n';
  };
  const FitResult result = fit(corpus, config, opts);
  save_train_state(output / "best", result.best, config);
  json summary{{"mode", mode},
               {"epochs_run", result.epochs_run},
               {"stop_reason", result.stop_reason},
               {"best_epoch", result.best.epoch},
               {"best_val_ndcg20", result.best.best_metric},
               {"checkpoint_id", checkpoint_id(result.best.params)},
               {"instance_count", result.instance_count}};
  write_json(output / "summary.json", summary);
  out << "best epoch " << result.best.epoch << " val ndcg@20 " << result.best.best_metric << " ("
      << result.stop_reason << ")\n";
}

// ---- evaluate ----------------------------------------------------------------

struct EvaluateArgs {
  std::optional<std::string> config, checkpoint, data, split, output;
  std::optional<std::vector<std::size_t>> k_list;
  std::optional<std::vector<double>> noise_ratios;
  std::optional<std::uint64_t> noise_seed;
};

void cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  json cfg = load_config_file(a.config);
  put(cfg, "checkpoint", a.checkpoint);
  put(cfg, "data_path", a.data);
  put(cfg, "split", a.split);
  put(cfg, "output_dir", a.output);
  put(cfg, "k_list", a.k_list);
  put(cfg, "noise_ratios", a.noise_ratios);
  put(cfg, "noise_seed", a.noise_seed);
  reject_unknown(cfg, {"checkpoint", "data_path", "split", "output_dir", "k_list", "noise_ratios", "noise_seed"},
                 "evaluate");
  const fs::path ckpt = resolve_checkpoint(require(cfg, "checkpoint", "--checkpoint"));
  const fs::path data = require(cfg, "data_path", "--data");
  const auto output = take<std::string>(cfg, "output_dir", "");
  EvalOptions opts;
  opts.split = split_from_string(take<std::string>(cfg, "split", "test"));
  opts.k_list = take<std::vector<std::size_t>>(cfg, "k_list", {5, 10, 20});
  opts.noise_seed = take<std::uint64_t>(cfg, "noise_seed", 0);
  std::vector<double> ratios{0.0};
  for (double r : take<std::vector<double>>(cfg, "noise_ratios", {})) {
    if (std::find(ratios.begin(), ratios.end(), r) == ratios.end()) ratios.push_back(r);
  }

  const ModelParams params = load_checkpoint(ckpt);
  const Corpus corpus = load_compatible(data, params);
  const std::string id = checkpoint_id(params);
  json reports = json::array();
  for (double ratio : ratios) {
    opts.noise_ratio = ratio;
    reports.push_back(report_to_json(evaluate(params, corpus, opts), id, opts.noise_seed));
  }
  const json result{{"checkpoint", ckpt.string()}, {"checkpoint_id", id}, {"reports", reports}};
  if (!output.empty()) {
    fs::create_directories(output);
    write_json(fs::path(output) / "eval.json", result);
    write_json(fs::path(output) / "config.json", json{{"command", "evaluate"},
                                                       {"checkpoint", ckpt.string()},
                                                       {"data_path", data.string()},
                                                       {"split", to_string(opts.split)},
                                                       {"k_list", opts.k_list},
                                                       {"noise_ratios", ratios},
                                                       {"noise_seed", opts.noise_seed},
                                                       {"output_dir", output}});
  }
  out << result.dump(2) << '\n';
}

// ---- synth -------------------------------------------------------------------

struct SynthArgs {
  std::optional<std::string> config, output;
  std::optional<std::size_t> users, items, intents, length, support, successors;
  std::optional<std::uint64_t> seed;
  std::optional<double> restart, concentration;
  std::optional<bool> disjoint;
};

void cmd_synth(const SynthArgs& a, std::ostream& out) {
  json cfg = load_config_file(a.config);
  put(cfg, "output_dir", a.output);
  put(cfg, "users", a.users);
  put(cfg, "items", a.items);
  put(cfg, "intents", a.intents);
  put(cfg, "length", a.length);
  put(cfg, "support", a.support);
  put(cfg, "successors", a.successors);
  put(cfg, "seed", a.seed);
  put(cfg, "restart", a.restart);
  put(cfg, "concentration", a.concentration);
  put(cfg, "disjoint", a.disjoint);
  reject_unknown(cfg,
                 {"output_dir", "users", "items", "intents", "length", "support", "successors", "seed", "restart",
                  "concentration", "disjoint"},
                 "synth");
  const fs::path output = require(cfg, "output_dir", "--output");
  SynthOptions o;
  o.users = take(cfg, "users", o.users);
  o.items = take(cfg, "items", o.items);
  o.intents = take(cfg, "intents", o.intents);
  o.length = take(cfg, "length", o.length);
  o.support = take(cfg, "support", o.support);
  o.successors = take(cfg, "successors", o.successors);
  o.seed = take(cfg, "seed", o.seed);
  o.restart = take(cfg, "restart", o.restart);
  o.concentration = take(cfg, "concentration", o.concentration);
  o.disjoint = take(cfg, "disjoint", o.disjoint);
  const SynthCorpus synth = generate_synthetic(o);
  write_synthetic(output, synth);
  write_json(output / "config.json", json{{"command", "synth"},
                                          {"output_dir", output.string()},
                                          {"users", o.users},
                                          {"items", o.items},
                                          {"intents", o.intents},
                                          {"length", o.length},
                                          {"support", o.support},
                                          {"successors", o.successors},
                                          {"seed", o.seed},
                                          {"restart", o.restart},
                                          {"concentration", o.concentration},
                                          {"disjoint", o.disjoint}});
  out << o.users << " users over " << o.items << " items, " << o.intents << " intents -> "
      << (output / "interactions.txt").string() << '\n';
}

// ---- heatmap -----------------------------------------------------------------

struct HeatmapArgs {
  std::optional<std::string> config, checkpoint, data, output;
  std::optional<std::vector<std::string>> users;
};

void cmd_heatmap(const HeatmapArgs& a, std::ostream& out) {
  json cfg = load_config_file(a.config);
  put(cfg, "checkpoint", a.checkpoint);
  put(cfg, "data_path", a.data);
  put(cfg, "output_dir", a.output);
  put(cfg, "users", a.users);
  reject_unknown(cfg, {"checkpoint", "data_path", "output_dir", "users"}, "heatmap");
  const fs::path ckpt = resolve_checkpoint(require(cfg, "checkpoint", "--checkpoint"));
  const fs::path data = require(cfg, "data_path", "--data");
  const fs::path output = require(cfg, "output_dir", "--output");
  const auto users = take<std::vector<std::string>>(cfg, "users", {});
  if (users.empty()) throw InputError("--user is required");

  const ModelParams params = load_checkpoint(ckpt);
  const Corpus corpus = load_compatible(data, params);
  fs::create_directories(output);
  for (const auto& user : users) {
    const auto it = std::find_if(corpus.sequences.begin(), corpus.sequences.end(),
                                 [&](const InteractionSequence& s) { return s.user_id == user; });
    if (it == corpus.sequences.end()) throw InputError("unknown user '" + user + "'");
    const SplitView view = corpus.view(static_cast<std::size_t>(it - corpus.sequences.begin()));
    const fs::path path = output / ("heatmap_" + user + ".csv");
    export_intent_heatmap(params, view.test_input, path);
    out << path.string() << '\n';
  }
  write_json(output / "config.json", json{{"command", "heatmap"},
                                          {"checkpoint", ckpt.string()},
                                          {"data_path", data.string()},
                                          {"output_dir", output.string()},
                                          {"users", users}});
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Intent contrastive sequential recommendation"};
  app.require_subcommand(1);

  PreprocessArgs pre;
  auto* p = app.add_subcommand("preprocess", "Five-core filter, reindex and split a raw interaction file");
  p->add_option("--config", pre.config, "JSON config file");
  p->add_option("--input", pre.input, "Raw file: one 'user item item ...' line per user");
  p->add_option("--output", pre.output, "Dataset directory to write");
  p->add_option("--min-count", pre.min_count, "Core threshold (default 5)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model with early stopping on validation NDCG@20");
  t->add_option("--config", tr.config, "JSON config file; flags override its keys");
  t->add_option("--data", tr.data, "Preprocessed dataset directory");
  t->add_option("--output", tr.output, "Run directory");
  t->add_option("--d", tr.d, "Embedding size (64)");
  t->add_option("--n", tr.n, "Maximum sequence length (50)");
  t->add_option("--batch-size", tr.batch_size, "Mini-batch size (256)");
  t->add_option("--lr", tr.lr, "Adam learning rate (1e-3)");
  t->add_option("--lambda", tr.lambda, "Coarse-grain contrastive weight (0.3)");
  t->add_option("--beta", tr.beta, "Fine-grain contrastive weight (0.1)");
  t->add_option("--k", tr.k, "Number of intent prototypes (256)");
  t->add_option("--tau", tr.tau, "Temperature (1.0)");
  t->add_option("--dropout", tr.dropout, "Dropout rate (0.5)");
  t->add_option("--max-epochs", tr.max_epochs, "Epoch limit (300)");
  t->add_option("--patience", tr.patience, "Epochs without improvement before stopping (10)");
  t->add_option("--seed", tr.seed, "Random seed (1)");
  t->add_option("--encoder", tr.encoder, "attention or recurrent");
  t->add_option("--cluster-iters", tr.cluster_iters, "k-means iterations per refresh (20)");
  t->add_option("--blocks", tr.blocks, "Self-attention blocks (2)");
  t->add_option("--heads", tr.heads, "Attention heads (2)");
  t->add_option("--ffn-dim", tr.ffn_dim, "Feed-forward width, 0 = d");
  t->add_option("--init-std", tr.init_std, "Initialization standard deviation (0.02)");
  t->add_option("--weight-decay", tr.weight_decay, "L2 weight decay (0)");
  t->add_option("--grad-clip", tr.grad_clip, "Global gradient-norm clip, 0 = off");
  t->add_option("--reduction", tr.reduction, "Contrastive reduction: mean or sum");
  t->add_option("--false-negative-mask", tr.fnm, "Mask same-label in-batch negatives (true)");
  t->add_option("--ficl-shared-pool", tr.shared_pool, "Pool both views in one fine-grain term (false)");
  t->add_option("--normalize-prototypes", tr.normalize, "Cluster L2-normalized intents (false)");
  t->add_option("--log-timing", tr.log_timing, "Record wall-clock seconds in metrics.jsonl (false)");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Full-ranking HR@k and NDCG@k of a checkpoint");
  e->add_option("--config", ev.config, "JSON config file");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint or run directory");
  e->add_option("--data", ev.data, "Preprocessed dataset directory");
  e->add_option("--split", ev.split, "valid or test (test)");
  e->add_option("--k", ev.k_list, "Cut-offs (5 10 20)");
  e->add_option("--noise-ratio", ev.noise_ratios, "Extra noise ratios; ratio 0 is always reported");
  e->add_option("--noise-seed", ev.noise_seed, "Seed of the noise streams (0)");
  e->add_option("--output", ev.output, "Directory for eval.json and config.json");

  SynthArgs sy;
  auto* s = app.add_subcommand("synth", "Generate a planted-intent corpus");
  s->add_option("--config", sy.config, "JSON config file");
  s->add_option("--output", sy.output, "Directory to write");
  s->add_option("--users", sy.users, "Users (200)");
  s->add_option("--items", sy.items, "Items (500)");
  s->add_option("--intents", sy.intents, "Latent intents (4)");
  s->add_option("--length", sy.length, "Sequence length (20)");
  s->add_option("--support", sy.support, "Items per intent, 0 = items / intents");
  s->add_option("--successors", sy.successors, "Markov successors per item (3)");
  s->add_option("--restart", sy.restart, "Chance of redrawing from the intent distribution (0.1)");
  s->add_option("--concentration", sy.concentration, "Dirichlet concentration (0.5)");
  s->add_option("--seed", sy.seed, "Random seed (1)");
  s->add_option("--disjoint", sy.disjoint, "Partition items between intents (false)");

  HeatmapArgs hm;
  auto* h = app.add_subcommand("heatmap", "Export the intent similarity matrix of users' sequences as CSV");
  h->add_option("--config", hm.config, "JSON config file");
  h->add_option("--checkpoint", hm.checkpoint, "Checkpoint or run directory");
  h->add_option("--data", hm.data, "Preprocessed dataset directory");
  h->add_option("--user", hm.users, "User ids from the dataset");
  h->add_option("--output", hm.output, "Directory for the CSV files");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (p->parsed()) cmd_preprocess(pre, out);
    if (t->parsed()) cmd_train(tr, out);
    if (e->parsed()) cmd_evaluate(ev, out);
    if (s->parsed()) cmd_synth(sy, out);
    if (h->parsed()) cmd_heatmap(hm, out);
  } catch (const InputError& ex) {
    err << "error: " << ex.what() << '\n';
    return 2;
  } catch (const ParseError& ex) {
    err << "error: " << ex.what() << '\n';
    return 2;
  } catch (const EmptyCorpusError& ex) {
    err << "error: " << ex.what() << '\n';
    return 2;
  } catch (const OutOfVocabularyError& ex) {
    err << "error: " << ex.what() << '\n';
    return 2;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return 1;
  }
  return 0;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace icsrec
