#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "icsrec/common.hpp"

namespace icsrec {

/// One user's chronological item history.
struct InteractionSequence {
  std::string user_id;
  std::vector<ItemId> items;
};

/// Leave-one-out views of one user: train = items[0, L-2), valid label at L-2,
/// test label at L-1 (0-based).
struct SplitView {
  std::span<const ItemId> train;
  std::span<const ItemId> valid_input;
  ItemId valid_label;
  std::span<const ItemId> test_input;
  ItemId test_label;
};

struct Corpus {
  std::vector<InteractionSequence> sequences;
  ItemId item_count = 0;
  bool split = false;

  std::size_t user_count() const { return sequences.size(); }
  std::size_t action_count() const;

  /// Requires split == true.
  SplitView view(std::size_t user) const;
};

struct CorpusStats {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t actions = 0;
  double avg_actions_per_user = 0.0;
  double avg_actions_per_item = 0.0;
  double sparsity = 0.0;
};

CorpusStats compute_stats(const Corpus& corpus);

/// Parses "user_id item_1 ... item_L" lines. Item ids must be positive.
/// item_count is set to the largest id seen.
Corpus load_interactions(const std::filesystem::path& path);
Corpus parse_interactions(std::istream& in, const std::string& source = "");

/// Iterated 5-core filter: drops users with fewer than `min_count` actions and
/// items with fewer than `min_count` occurrences until neither changes.
/// Item ids are kept as given. Throws EmptyCorpusError on an empty fixpoint.
Corpus five_core_filter(const Corpus& corpus, std::size_t min_count = 5);

/// Maps dense ids back to the ids of the raw log.
class IdMap {
 public:
  IdMap() = default;
  explicit IdMap(std::vector<ItemId> original_of_dense);

  ItemId original(ItemId dense) const;
  ItemId dense(ItemId original) const;
  std::size_t size() const { return original_of_dense_.size(); }
  const std::vector<ItemId>& originals() const { return original_of_dense_; }

 private:
  std::vector<ItemId> original_of_dense_;  // index dense-1
  std::unordered_map<ItemId, ItemId> dense_of_original_;
};

struct Reindexed {
  Corpus corpus;
  IdMap id_map;
};

/// Remaps item ids to [1, item_count] by first appearance (user order, then
/// position).
Reindexed reindex(const Corpus& corpus);

struct SplitReport {
  Corpus corpus;
  std::size_t dropped_users = 0;  // sequences shorter than 3
};

/// Marks the corpus as leave-one-out split. Users with fewer than 3 items are
/// dropped and counted.
SplitReport split_leave_one_out(const Corpus& corpus);

struct Preprocessed {
  Corpus corpus;  // split
  IdMap id_map;
  std::size_t dropped_users = 0;
};

/// five_core_filter, reindex, then split_leave_one_out.
Preprocessed preprocess(const Corpus& raw, std::size_t min_count = 5);

struct TrainingInstance {
  InstanceId instance_id = 0;
  std::vector<ItemId> input;  // at most n items, oldest first, no padding
  ItemId target = kPadId;
  std::size_t source_user = 0;
};

/// One instance per target position t in [1, |sequence|) (0-based) with
/// input = the min(t, n) items preceding t. Empty for sequences shorter than 2.
std::vector<TrainingInstance> segment(std::span<const ItemId> sequence, std::size_t n);

struct SegmentedCorpus {
  std::vector<TrainingInstance> instances;
  std::size_t skipped_users = 0;  // training views shorter than 2
};

/// Segments every user's training view and numbers instances globally.
SegmentedCorpus segment_corpus(const Corpus& corpus, std::size_t n);

/// Inverted index target item -> instance ids sharing that target.
class TargetIndex {
 public:
  TargetIndex() = default;

  std::span<const InstanceId> bucket(ItemId target) const;
  std::size_t bucket_count() const { return nonempty_; }
  std::size_t instance_count() const { return total_; }
  const std::unordered_map<ItemId, std::vector<InstanceId>>& buckets() const { return buckets_; }

  friend TargetIndex build_target_index(std::span<const TrainingInstance> instances);

 private:
  std::unordered_map<ItemId, std::vector<InstanceId>> buckets_;
  std::size_t nonempty_ = 0;
  std::size_t total_ = 0;
};

/// Instance ids inside each bucket are in increasing order.
TargetIndex build_target_index(std::span<const TrainingInstance> instances);

/// Uniform draw from the anchor's bucket without the anchor; the anchor itself
/// when it is alone. Throws IndexIntegrityError if the anchor is not indexed.
InstanceId sample_positive(const TargetIndex& index, const TrainingInstance& anchor, Rng& rng);

/// Preprocessed-dataset directory: sequences.txt, id_map.json, stats.json.
void write_dataset(const std::filesystem::path& dir, const Corpus& corpus, const IdMap& id_map);
Corpus read_dataset(const std::filesystem::path& dir);
IdMap read_id_map(const std::filesystem::path& dir);

}  // namespace icsrec
