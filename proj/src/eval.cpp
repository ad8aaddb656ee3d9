#include "icsrec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_set>

namespace icsrec {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Split split) { return split == Split::kValid ? "valid" : "test"; }

Split split_from_string(const std::string& name) {
  if (name == "valid" || name == "validation") return Split::kValid;
  if (name == "test") return Split::kTest;
  throw InputError("unknown split '" + name + "' (expected valid or test)");
}

std::size_t rank_from_scores(std::span<const double> scores, ItemId g) {
  if (g < 1 || static_cast<std::size_t>(g) > scores.size()) {
    throw OutOfVocabularyError("label " + std::to_string(g) + " outside [1, " + std::to_string(scores.size()) + "]");
  }
  const auto gi = static_cast<std::size_t>(g - 1);
  const double target = scores[gi];
  std::size_t rank = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > target || (scores[i] == target && i < gi)) ++rank;
  }
  return rank;
}

std::size_t rank_of_truth(const Eigen::Ref<const Vec>& intent, const ModelParams& params, ItemId g) {
  const Mat& items = params.at("item_embeddings");
  const Eigen::Index m = items.rows() - 1;
  const Vec scores = items.bottomRows(m) * intent;
  return rank_from_scores(std::span<const double>(scores.data(), static_cast<std::size_t>(m)), g);
}

HitNdcg metrics_at_k(std::size_t rank, std::size_t k) {
  if (rank == 0 || k == 0) throw InputError("rank and k must be at least 1");
  if (rank > k) return {0.0, 0.0};
  return {1.0, 1.0 / std::log2(static_cast<double>(rank) + 1.0)};
}

std::vector<ItemId> inject_noise(std::span<const ItemId> window, std::span<const ItemId> history, double ratio,
                                 ItemId item_count, Rng& rng) {
  if (ratio < 0.0 || ratio >= 1.0) throw InputError("noise ratio must lie in [0, 1)");
  std::vector<ItemId> out(window.begin(), window.end());
  const auto count = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(window.size()) - 1e-9));
  if (count == 0) return out;
  const std::unordered_set<ItemId> seen(history.begin(), history.end());
  std::vector<ItemId> pool;
  for (ItemId id = 1; id <= item_count; ++id) {
    if (!seen.contains(id)) pool.push_back(id);
  }
  if (pool.size() < count) {
    throw InputError("only " + std::to_string(pool.size()) + " unseen items available for " + std::to_string(count) +
                     " noise insertions");
  }
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
    std::uniform_int_distribution<std::size_t> gap(0, out.size());
    out.insert(out.begin() + static_cast<std::ptrdiff_t>(gap(rng)), pool[i]);
  }
  return out;
}

EvalReport evaluate_with(const Scorer& scorer, const Corpus& corpus, const EvalOptions& options) {
  if (options.k_list.empty()) throw InputError("k list is empty");
  for (auto k : options.k_list) {
    if (k == 0) throw InputError("k must be at least 1");
  }
  EvalReport report;
  report.split = options.split;
  report.noise_ratio = options.noise_ratio;
  report.k_list = options.k_list;
  for (auto k : options.k_list) {
    report.hr[k] = 0.0;
    report.ndcg[k] = 0.0;
  }
  const std::size_t users = corpus.user_count();
  report.user_count = users;
  if (users == 0) return report;

  for (std::size_t start = 0; start < users; start += options.batch_size) {
    const std::size_t count = std::min(options.batch_size, users - start);
    std::vector<std::vector<ItemId>> windows(count);
    std::vector<ItemId> labels(count);
    for (std::size_t i = 0; i < count; ++i) {
      const SplitView view = corpus.view(start + i);
      const auto input = options.split == Split::kValid ? view.valid_input : view.test_input;
      labels[i] = options.split == Split::kValid ? view.valid_label : view.test_label;
      const std::size_t len = options.window == 0 ? input.size() : std::min(options.window, input.size());
      const auto window = input.last(len);
      windows[i].assign(window.begin(), window.end());
      if (options.noise_ratio > 0.0) {
        Rng rng = make_stream(options.noise_seed, start + i, 7);
        windows[i] = inject_noise(window, corpus.sequences[start + i].items, options.noise_ratio, corpus.item_count, rng);
      }
    }
    std::vector<std::span<const ItemId>> spans(windows.begin(), windows.end());
    const Mat scores = scorer(spans);
    for (std::size_t i = 0; i < count; ++i) {
      const auto row = scores.row(static_cast<Eigen::Index>(i));
      const std::size_t rank =
          rank_from_scores(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())), labels[i]);
      for (auto k : options.k_list) {
        const HitNdcg m = metrics_at_k(rank, k);
        report.hr[k] += m.hr;
        report.ndcg[k] += m.ndcg;
      }
    }
  }
  for (auto k : options.k_list) {
    report.hr[k] /= static_cast<double>(users);
    report.ndcg[k] /= static_cast<double>(users);
  }
  return report;
}

EvalReport evaluate(const ModelParams& params, const Corpus& corpus, const EvalOptions& options) {
  const Mat& table = params.at("item_embeddings");
  const Eigen::Index m = table.rows() - 1;
  Scorer scorer = [&](std::span<const std::span<const ItemId>> inputs) -> Mat {
    const Mat intents = encode_intents(params, inputs, inputs.size());
    return intents * table.bottomRows(m).transpose();
  };
  EvalOptions opts = options;
  opts.window = params.shape().n;
  return evaluate_with(scorer, corpus, opts);
}

Mat intent_heatmap(const ModelParams& params, std::span<const ItemId> user_sequence) {
  if (user_sequence.empty()) throw EmptyInputError("heat map needs at least one item");
  const auto window = left_pad(user_sequence, params.shape().n);
  const SequenceEmbedding emb = embed(params, window);
  const SequenceRepr repr = params.shape().kind == EncoderKind::kAttention ? encode(params, emb)
                                                                           : encode_recurrent(params, emb);
  const auto valid = static_cast<Eigen::Index>(std::min(user_sequence.size(), params.shape().n));
  const Mat h = repr.hidden.bottomRows(valid);
  return h * h.transpose();
}

void export_intent_heatmap(const ModelParams& params, std::span<const ItemId> user_sequence, const fs::path& path) {
  const Mat gram = intent_heatmap(params, user_sequence);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(std::numeric_limits<double>::max_digits10);
  for (Eigen::Index r = 0; r < gram.rows(); ++r) {
    for (Eigen::Index c = 0; c < gram.cols(); ++c) {
      if (c > 0) out << ',';
      out << gram(r, c);
    }
    out << '\n';
  }
  if (!out) throw IoError("short write to " + path.string());
}

json report_to_json(const EvalReport& report, const std::string& checkpoint_id, std::uint64_t seed) {
  json j;
  j["split"] = to_string(report.split);
  j["noise_ratio"] = report.noise_ratio;
  j["k_list"] = report.k_list;
  json hr = json::object();
  json ndcg = json::object();
  for (auto k : report.k_list) {
    hr[std::to_string(k)] = report.hr.at(k);
    ndcg[std::to_string(k)] = report.ndcg.at(k);
  }
  j["hr"] = std::move(hr);
  j["ndcg"] = std::move(ndcg);
  j["user_count"] = report.user_count;
  j["checkpoint_id"] = checkpoint_id;
  j["seed"] = seed;
  return j;
}

}  // namespace icsrec
