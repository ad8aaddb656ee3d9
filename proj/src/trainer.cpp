#include "icsrec/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "icsrec/eval.hpp"

namespace icsrec {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  if (d == 0 || n == 0 || batch_size == 0) throw InputError("d, n and batch_size must be positive");
  if (k == 0) throw InputError("k must be positive");
  if (max_epochs == 0) throw InputError("max_epochs must be positive");
  if (cluster_iters == 0) throw InputError("cluster_iters must be positive");
  if (!(lr >= 0.0)) throw InputError("lr must be non-negative");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InputError("lambda must lie in [0, 1]");
  if (!(beta >= 0.0 && beta <= 1.0)) throw InputError("beta must lie in [0, 1]");
  if (!(tau > 0.0)) throw InputError("tau must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InputError("dropout must lie in [0, 1)");
  if (encoder_kind == EncoderKind::kAttention) {
    if (blocks == 0 || heads == 0) throw InputError("blocks and heads must be positive");
    if (d % heads != 0) throw InputError("d must be divisible by heads");
  }
  if (weight_decay < 0.0 || grad_clip < 0.0) throw InputError("weight_decay and grad_clip must be non-negative");
}

ModelShape TrainConfig::model_shape(ItemId item_count) const {
  ModelShape s;
  s.d = d;
  s.n = n;
  s.blocks = blocks;
  s.heads = heads;
  s.ffn_dim = ffn_dim == 0 ? d : ffn_dim;
  s.item_count = item_count;
  s.kind = encoder_kind;
  s.dropout = dropout;
  return s;
}

ContrastiveOptions TrainConfig::contrastive_options() const {
  ContrastiveOptions o;
  o.reduction = contrastive_reduction;
  o.false_negative_mask = false_negative_mask;
  o.ficl_shared_pool = ficl_shared_pool;
  return o;
}

json to_json(const TrainConfig& c) {
  return json{{"d", c.d},
              {"n", c.n},
              {"batch_size", c.batch_size},
              {"lr", c.lr},
              {"lambda", c.lambda},
              {"beta", c.beta},
              {"k", c.k},
              {"tau", c.tau},
              {"dropout", c.dropout},
              {"max_epochs", c.max_epochs},
              {"patience", c.patience},
              {"seed", c.seed},
              {"encoder_kind", to_string(c.encoder_kind)},
              {"cluster_iters", c.cluster_iters},
              {"blocks", c.blocks},
              {"heads", c.heads},
              {"ffn_dim", c.ffn_dim},
              {"init_std", c.init_std},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"adam_eps", c.adam_eps},
              {"weight_decay", c.weight_decay},
              {"grad_clip", c.grad_clip},
              {"contrastive_reduction", c.contrastive_reduction == Reduction::kMean ? "mean" : "sum"},
              {"false_negative_mask", c.false_negative_mask},
              {"ficl_shared_pool", c.ficl_shared_pool},
              {"normalize_prototypes", c.normalize_prototypes}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw InputError("train config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "d") c.d = value.get<std::size_t>();
      else if (key == "n") c.n = value.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "lr") c.lr = value.get<double>();
      else if (key == "lambda") c.lambda = value.get<double>();
      else if (key == "beta") c.beta = value.get<double>();
      else if (key == "k") c.k = value.get<std::size_t>();
      else if (key == "tau") c.tau = value.get<double>();
      else if (key == "dropout") c.dropout = value.get<double>();
      else if (key == "max_epochs") c.max_epochs = value.get<std::size_t>();
      else if (key == "patience") c.patience = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "encoder_kind") c.encoder_kind = encoder_kind_from_string(value.get<std::string>());
      else if (key == "cluster_iters") c.cluster_iters = value.get<std::size_t>();
      else if (key == "blocks") c.blocks = value.get<std::size_t>();
      else if (key == "heads") c.heads = value.get<std::size_t>();
      else if (key == "ffn_dim") c.ffn_dim = value.get<std::size_t>();
      else if (key == "init_std") c.init_std = value.get<double>();
      else if (key == "adam_beta1") c.adam_beta1 = value.get<double>();
      else if (key == "adam_beta2") c.adam_beta2 = value.get<double>();
      else if (key == "adam_eps") c.adam_eps = value.get<double>();
      else if (key == "weight_decay") c.weight_decay = value.get<double>();
      else if (key == "grad_clip") c.grad_clip = value.get<double>();
      else if (key == "contrastive_reduction") {
        const auto r = value.get<std::string>();
        if (r == "mean") c.contrastive_reduction = Reduction::kMean;
        else if (r == "sum") c.contrastive_reduction = Reduction::kSum;
        else throw InputError("contrastive_reduction must be mean or sum");
      } else if (key == "false_negative_mask") c.false_negative_mask = value.get<bool>();
      else if (key == "ficl_shared_pool") c.ficl_shared_pool = value.get<bool>();
      else if (key == "normalize_prototypes") c.normalize_prototypes = value.get<bool>();
      else throw InputError("unknown train config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw InputError(std::string("train config: ") + e.what());
  }
  return c;
}

void Adam::step(ModelParams& params, std::map<std::string, Mat> grads, const Options& o) {
  ++steps_;
  if (o.weight_decay > 0.0) {
    for (auto& [name, g] : grads) g += o.weight_decay * params.at(name);
  }
  if (o.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) sq += g.squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > o.grad_clip) {
      for (auto& [name, g] : grads) g *= o.grad_clip / norm;
    }
  }
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(steps_));
  for (auto& [name, g] : grads) {
    Mat& p = params.at(name);
    auto [mit, m_new] = m_.try_emplace(name, Mat::Zero(p.rows(), p.cols()));
    auto [vit, v_new] = v_.try_emplace(name, Mat::Zero(p.rows(), p.cols()));
    Mat& m = mit->second;
    Mat& v = vit->second;
    m = o.beta1 * m + (1.0 - o.beta1) * g;
    v = o.beta2 * v + (1.0 - o.beta2) * g.cwiseProduct(g);
    p.array() -= o.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + o.eps);
  }
  params.round_to_float();
}

TrainState initial_state(const TrainConfig& config, ItemId item_count) {
  config.validate();
  TrainState state;
  state.params = ModelParams::initialize(config.model_shape(item_count), config.seed, config.init_std);
  state.seed = config.seed;
  return state;
}

namespace {

std::vector<std::span<const ItemId>> input_spans(std::span<const TrainingInstance> instances) {
  std::vector<std::span<const ItemId>> spans;
  spans.reserve(instances.size());
  for (const auto& inst : instances) spans.emplace_back(inst.input);
  return spans;
}

void check_instance_ids(std::span<const TrainingInstance> instances) {
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (instances[i].instance_id != static_cast<InstanceId>(i)) {
      throw IndexIntegrityError("instance ids must equal their positions");
    }
  }
}

}  // namespace

PrototypeSet refresh_prototypes(const TrainState& state, std::span<const TrainingInstance> instances,
                                const TrainConfig& config) {
  if (instances.empty()) throw EmptyInputError("no training instances to cluster");
  const auto spans = input_spans(instances);
  const Mat intents = encode_intents(state.params, spans);
  KMeansOptions km;
  km.k = config.k;
  km.max_iters = config.cluster_iters;
  km.seed = make_stream(state.seed, state.epoch + 1, 3)();
  km.normalize = config.normalize_prototypes;
  return fit_prototypes(intents, km);
}

LossBreakdown train_epoch(TrainState& state, std::span<const TrainingInstance> instances, const TargetIndex& index,
                          const TrainConfig& config) {
  check_instance_ids(instances);
  const bool contrastive = !config.backbone_only();
  const bool use_ficl = config.beta > 0.0;
  if (use_ficl && !state.prototypes.fitted()) throw StateError("prototypes must be refreshed before the epoch");

  const std::size_t epoch = state.epoch + 1;
  std::vector<std::size_t> order(instances.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng = make_stream(state.seed, epoch, 0);
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  Rng positive_rng = make_stream(state.seed, epoch, 1);
  Rng dropout_rng = make_stream(state.seed, epoch, 2);

  const ContrastiveOptions copts = config.contrastive_options();
  const Adam::Options adam{config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay,
                           config.grad_clip};
  const std::size_t n = config.n;
  double rec_sum = 0.0, cicl_sum = 0.0, ficl_sum = 0.0;

  for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
    const std::size_t count = std::min(config.batch_size, order.size() - start);
    std::vector<std::span<const ItemId>> anchors(count);
    std::vector<ItemId> targets(count);
    for (std::size_t i = 0; i < count; ++i) {
      const auto& inst = instances[order[start + i]];
      anchors[i] = inst.input;
      targets[i] = inst.target;
    }

    ad::Tape tape;
    BoundParams bound(tape, state.params, true);
    const EncodedVars enc1 = forward(tape, bound, make_batch(anchors, n), true, &dropout_rng);
    std::vector<ad::Var> terms{ad::rec_loss(tape, enc1.intent, bound["item_embeddings"], targets)};
    std::vector<double> weights{1.0};
    double cicl_value = 0.0, ficl_value = 0.0;

    if (contrastive) {
      std::vector<std::span<const ItemId>> positives(count);
      for (std::size_t i = 0; i < count; ++i) {
        const InstanceId pid = sample_positive(index, instances[order[start + i]], positive_rng);
        positives[i] = instances[static_cast<std::size_t>(pid)].input;
      }
      const EncodedVars enc2 = forward(tape, bound, make_batch(positives, n), true, &dropout_rng);
      if (config.lambda > 0.0) {
        ad::Var cicl = ad::masked_info_nce(tape, enc1.intent, enc2.intent,
                                           std::vector<std::int64_t>(targets.begin(), targets.end()), config.tau, copts);
        cicl_value = tape.value(cicl)(0, 0);
        terms.push_back(cicl);
        weights.push_back(config.lambda);
      }
      if (use_ficl) {
        Mat c1, c2;
        const auto ids1 = query_rows(tape.value(enc1.intent), state.prototypes, &c1);
        const auto ids2 = query_rows(tape.value(enc2.intent), state.prototypes, &c2);
        if (config.ficl_shared_pool) {
          ad::Var views = ad::vstack(tape, enc1.intent, enc2.intent);
          Mat protos(2 * c1.rows(), c1.cols());
          protos << c1, c2;
          std::vector<std::int64_t> labels(ids1.begin(), ids1.end());
          labels.insert(labels.end(), ids2.begin(), ids2.end());
          ad::Var f = ad::masked_info_nce(tape, views, tape.constant(std::move(protos)), std::move(labels), config.tau, copts);
          // The mean over 2B pairs is half the two-addend value.
          const double scale = copts.reduction == Reduction::kMean ? 2.0 : 1.0;
          ficl_value = scale * tape.value(f)(0, 0);
          terms.push_back(f);
          weights.push_back(config.beta * scale);
        } else {
          ad::Var f1 = ad::masked_info_nce(tape, enc1.intent, tape.constant(std::move(c1)),
                                           std::vector<std::int64_t>(ids1.begin(), ids1.end()), config.tau, copts);
          ad::Var f2 = ad::masked_info_nce(tape, enc2.intent, tape.constant(std::move(c2)),
                                           std::vector<std::int64_t>(ids2.begin(), ids2.end()), config.tau, copts);
          ficl_value = tape.value(f1)(0, 0) + tape.value(f2)(0, 0);
          terms.push_back(f1);
          terms.push_back(f2);
          weights.push_back(config.beta);
          weights.push_back(config.beta);
        }
      }
    }

    ad::Var total = ad::weighted_sum(tape, terms, weights);
    const double rec_value = tape.value(terms[0])(0, 0);
    if (!std::isfinite(tape.value(total)(0, 0))) {
      throw NumericError("non-finite loss in epoch " + std::to_string(epoch) + " at batch starting " +
                         std::to_string(start) + " (rec=" + std::to_string(rec_value) +
                         ", cicl=" + std::to_string(cicl_value) + ", ficl=" + std::to_string(ficl_value) + ")");
    }
    tape.backward(total);
    state.optimizer.step(state.params, bound.grads(tape), adam);

    rec_sum += rec_value * static_cast<double>(count);
    cicl_sum += cicl_value * static_cast<double>(count);
    ficl_sum += ficl_value * static_cast<double>(count);
  }

  const double denom = instances.empty() ? 1.0 : static_cast<double>(instances.size());
  return total_loss(rec_sum / denom, cicl_sum / denom, ficl_sum / denom, config.lambda, config.beta);
}

json to_json(const EpochRecord& r) {
  json j{{"epoch", r.epoch},
         {"rec", r.loss.rec},
         {"cicl", r.loss.cicl},
         {"ficl", r.loss.ficl},
         {"total", r.loss.total},
         {"val_hr20", r.val_hr20},
         {"val_ndcg20", r.val_ndcg20}};
  j["seconds"] = r.seconds ? json(*r.seconds) : json(nullptr);
  return j;
}

FitResult fit(const Corpus& corpus, const TrainConfig& config, const FitOptions& options) {
  config.validate();
  if (!corpus.split) throw StateError("fit needs a leave-one-out split corpus");
  const SegmentedCorpus seg = segment_corpus(corpus, config.n);
  if (seg.instances.empty()) throw EmptyInputError("segmentation produced no training instances");
  const TargetIndex index = build_target_index(seg.instances);

  FitResult result;
  result.instance_count = seg.instances.size();
  TrainState state = initial_state(config, corpus.item_count);
  result.best = state;
  EvalOptions val_opts;
  val_opts.split = Split::kValid;
  val_opts.k_list = {20};

  result.stop_reason = "max_epochs";
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord record;
    record.epoch = epoch;
    try {
      if (config.beta > 0.0) state.prototypes = refresh_prototypes(state, seg.instances, config);
      record.loss = train_epoch(state, seg.instances, index, config);
    } catch (const NumericError&) {
      if (options.diagnostic_dir) save_train_state(*options.diagnostic_dir, state, config);
      throw;
    }
    state.epoch = epoch;
    const EvalReport val = evaluate(state.params, corpus, val_opts);
    record.val_hr20 = val.hr.at(20);
    record.val_ndcg20 = val.ndcg.at(20);
    if (options.record_timing) {
      record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    if (record.val_ndcg20 > state.best_metric) {
      state.best_metric = record.val_ndcg20;
      state.epochs_since_best = 0;
      result.best = state;
    } else {
      ++state.epochs_since_best;
    }
    result.history.push_back(record);
    result.epochs_run = epoch;
    if (options.on_epoch) options.on_epoch(record);
    if (state.epochs_since_best >= config.patience) {
      result.stop_reason = "early_stopping";
      break;
    }
  }
  result.best.best_metric = state.best_metric;
  return result;
}

void save_train_state(const fs::path& dir, const TrainState& state, const TrainConfig& config) {
  fs::create_directories(dir);
  save_checkpoint(dir / "model", state.params);
  if (state.prototypes.fitted()) save_prototypes(dir / "prototypes", state.prototypes);
  {
    std::ofstream out(dir / "train_config.json", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "train_config.json").string());
    out << to_json(config).dump(2) << '\n';
  }
  std::ofstream out(dir / "state.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "state.json").string());
  out << json{{"epoch", state.epoch},
              {"best_val_ndcg20", state.best_metric},
              {"epochs_since_best", state.epochs_since_best},
              {"seed", state.seed},
              {"optimizer_steps", state.optimizer.steps()}}
             .dump(2)
      << '\n';
}

}  // namespace icsrec
