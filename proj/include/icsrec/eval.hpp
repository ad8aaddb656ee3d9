#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icsrec/common.hpp"
#include "icsrec/corpus.hpp"
#include "icsrec/encoder.hpp"

namespace icsrec {

enum class Split { kValid, kTest };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct EvalReport {
  Split split = Split::kTest;
  double noise_ratio = 0.0;
  std::vector<std::size_t> k_list;
  std::map<std::size_t, double> hr;
  std::map<std::size_t, double> ndcg;
  std::size_t user_count = 0;
};

struct EvalOptions {
  Split split = Split::kTest;
  std::vector<std::size_t> k_list{5, 10, 20};
  double noise_ratio = 0.0;
  std::uint64_t noise_seed = 0;
  std::size_t batch_size = 256;
  /// Most recent items fed to the scorer (and exposed to noise); 0 = all.
  std::size_t window = 0;
};

struct HitNdcg {
  double hr = 0.0;
  double ndcg = 0.0;
};

/// 1 + #items scoring strictly higher + #items tied with a smaller id.
/// scores[i] belongs to item i + 1.
std::size_t rank_from_scores(std::span<const double> scores, ItemId g);

/// Full-ranking position of g under intent . M^T over items 1..item_count.
std::size_t rank_of_truth(const Eigen::Ref<const Vec>& intent, const ModelParams& params, ItemId g);

HitNdcg metrics_at_k(std::size_t rank, std::size_t k);

/// Maps a batch of input windows to a batch x item_count score matrix.
using Scorer = std::function<Mat(std::span<const std::span<const ItemId>>)>;

/// Per-user ranking of the split label over the whole item set, averaged.
EvalReport evaluate_with(const Scorer& scorer, const Corpus& corpus, const EvalOptions& options);

EvalReport evaluate(const ModelParams& params, const Corpus& corpus, const EvalOptions& options);

/// Inserts ceil(ratio * |window|) distinct items that never occur in
/// `history`, each at a uniformly random gap of the growing window.
std::vector<ItemId> inject_noise(std::span<const ItemId> window, std::span<const ItemId> history, double ratio,
                                 ItemId item_count, Rng& rng);

/// H H^T over the valid positions of the encoded window.
Mat intent_heatmap(const ModelParams& params, std::span<const ItemId> user_sequence);

/// Row-major CSV, no header.
void export_intent_heatmap(const ModelParams& params, std::span<const ItemId> user_sequence,
                           const std::filesystem::path& path);

nlohmann::json report_to_json(const EvalReport& report, const std::string& checkpoint_id, std::uint64_t seed);

}  // namespace icsrec
