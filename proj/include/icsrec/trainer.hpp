#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icsrec/corpus.hpp"
#include "icsrec/encoder.hpp"
#include "icsrec/intent.hpp"
#include "icsrec/losses.hpp"

namespace icsrec {

struct TrainConfig {
  std::size_t d = 64;
  std::size_t n = 50;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  double lambda = 0.3;
  double beta = 0.1;
  std::size_t k = 256;
  double tau = 1.0;
  double dropout = 0.5;
  std::size_t max_epochs = 300;
  std::size_t patience = 10;
  std::uint64_t seed = 1;
  EncoderKind encoder_kind = EncoderKind::kAttention;
  std::size_t cluster_iters = 20;

  std::size_t blocks = 2;
  std::size_t heads = 2;
  std::size_t ffn_dim = 0;  // 0: same as d
  double init_std = 0.02;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // global-norm clip, 0 = off
  Reduction contrastive_reduction = Reduction::kMean;
  bool false_negative_mask = true;
  bool ficl_shared_pool = false;
  bool normalize_prototypes = false;

  void validate() const;
  bool backbone_only() const { return lambda == 0.0 && beta == 0.0; }
  ModelShape model_shape(ItemId item_count) const;
  ContrastiveOptions contrastive_options() const;
};

nlohmann::json to_json(const TrainConfig& config);
/// Missing keys keep their defaults; unknown keys throw InputError.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 0.0;
  };

  /// One bias-corrected update; parameters are rounded back to float32 storage.
  void step(ModelParams& params, std::map<std::string, Mat> grads, const Options& options);
  std::size_t steps() const { return steps_; }

 private:
  std::size_t steps_ = 0;
  std::map<std::string, Mat> m_;
  std::map<std::string, Mat> v_;
};

struct TrainState {
  ModelParams params;
  PrototypeSet prototypes;
  Adam optimizer;
  std::size_t epoch = 0;  // epochs completed
  double best_metric = -1.0;
  std::size_t epochs_since_best = 0;
  std::uint64_t seed = 0;
};

TrainState initial_state(const TrainConfig& config, ItemId item_count);

/// Eval-mode intents of every instance clustered into config.k prototypes.
PrototypeSet refresh_prototypes(const TrainState& state, std::span<const TrainingInstance> instances,
                                const TrainConfig& config);

/// One pass over a seeded permutation of the instances. Returns
/// instance-weighted means of the loss components. Throws NumericError, with
/// the state left at the last finite update, when a batch loss is not finite.
LossBreakdown train_epoch(TrainState& state, std::span<const TrainingInstance> instances, const TargetIndex& index,
                          const TrainConfig& config);

struct EpochRecord {
  std::size_t epoch = 0;
  LossBreakdown loss;
  double val_hr20 = 0.0;
  double val_ndcg20 = 0.0;
  std::optional<double> seconds;
};

nlohmann::json to_json(const EpochRecord& record);

struct FitOptions {
  /// Called after every epoch, in order.
  std::function<void(const EpochRecord&)> on_epoch;
  /// Where to dump the state when training aborts on a non-finite loss.
  std::optional<std::filesystem::path> diagnostic_dir;
  bool record_timing = false;
};

struct FitResult {
  TrainState best;
  std::vector<EpochRecord> history;
  std::size_t epochs_run = 0;
  std::size_t instance_count = 0;
  std::string stop_reason;
};

/// Alternates prototype refresh and one training epoch, keeping the state with
/// the best validation NDCG@20 and stopping after `patience` epochs without
/// improvement.
FitResult fit(const Corpus& corpus, const TrainConfig& config, const FitOptions& options = {});

/// Model checkpoint + prototypes + train_config.json.
void save_train_state(const std::filesystem::path& dir, const TrainState& state, const TrainConfig& config);

}  // namespace icsrec
