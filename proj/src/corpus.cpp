#include "icsrec/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace icsrec {

namespace fs = std::filesystem;
using nlohmann::json;

std::size_t Corpus::action_count() const {
  std::size_t total = 0;
  for (const auto& s : sequences) total += s.items.size();
  return total;
}

SplitView Corpus::view(std::size_t user) const {
  if (!split) throw StateError("corpus has not been split");
  const auto& items = sequences.at(user).items;
  const std::span<const ItemId> all(items);
  const std::size_t len = all.size();
  return SplitView{all.first(len - 2), all.first(len - 2), all[len - 2], all.first(len - 1),
                   all[len - 1]};
}

CorpusStats compute_stats(const Corpus& corpus) {
  CorpusStats stats;
  std::unordered_set<ItemId> distinct;
  for (const auto& s : corpus.sequences) distinct.insert(s.items.begin(), s.items.end());
  stats.users = corpus.user_count();
  stats.items = distinct.size();
  stats.actions = corpus.action_count();
  if (stats.users > 0) stats.avg_actions_per_user = double(stats.actions) / double(stats.users);
  if (stats.items > 0) stats.avg_actions_per_item = double(stats.actions) / double(stats.items);
  if (stats.users > 0 && stats.items > 0) {
    stats.sparsity = 1.0 - double(stats.actions) / (double(stats.users) * double(stats.items));
  }
  return stats;
}

Corpus parse_interactions(std::istream& in, const std::string& source) {
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream tokens(line);
    InteractionSequence seq;
    if (!(tokens >> seq.user_id)) throw ParseError(source, line_no, "empty line");
    std::string tok;
    while (tokens >> tok) {
      ItemId id = 0;
      const auto* end = tok.data() + tok.size();
      auto [ptr, ec] = std::from_chars(tok.data(), end, id);
      if (ec != std::errc() || ptr != end) {
        throw ParseError(source, line_no, "item token '" + tok + "' is not an integer");
      }
      if (id <= 0) throw ParseError(source, line_no, "item id " + tok + " must be positive");
      seq.items.push_back(id);
      corpus.item_count = std::max(corpus.item_count, id);
    }
    if (seq.items.empty()) throw ParseError(source, line_no, "user " + seq.user_id + " has no items");
    corpus.sequences.push_back(std::move(seq));
  }
  if (corpus.sequences.empty()) throw EmptyCorpusError("interaction file is empty");
  return corpus;
}

Corpus load_interactions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_interactions(in, path.string());
}

Corpus five_core_filter(const Corpus& corpus, std::size_t min_count) {
  Corpus current = corpus;
  current.split = false;
  bool changed = true;
  while (changed) {
    changed = false;
    std::unordered_map<ItemId, std::size_t> item_counts;
    for (const auto& s : current.sequences) {
      for (ItemId id : s.items) ++item_counts[id];
    }
    std::vector<InteractionSequence> kept;
    kept.reserve(current.sequences.size());
    for (auto& s : current.sequences) {
      const auto before = s.items.size();
      std::erase_if(s.items, [&](ItemId id) { return item_counts[id] < min_count; });
      if (s.items.size() != before) changed = true;
      if (s.items.size() >= min_count) {
        kept.push_back(std::move(s));
      } else {
        changed = true;
      }
    }
    current.sequences = std::move(kept);
  }
  if (current.sequences.empty()) throw EmptyCorpusError("5-core filter removed every user");
  current.item_count = 0;
  for (const auto& s : current.sequences) {
    for (ItemId id : s.items) current.item_count = std::max(current.item_count, id);
  }
  return current;
}

IdMap::IdMap(std::vector<ItemId> original_of_dense) : original_of_dense_(std::move(original_of_dense)) {
  dense_of_original_.reserve(original_of_dense_.size());
  for (std::size_t i = 0; i < original_of_dense_.size(); ++i) {
    auto [it, inserted] = dense_of_original_.emplace(original_of_dense_[i], static_cast<ItemId>(i + 1));
    if (!inserted) throw InputError("id map lists original id " + std::to_string(it->first) + " twice");
  }
}

ItemId IdMap::original(ItemId dense) const {
  if (dense < 1 || static_cast<std::size_t>(dense) > original_of_dense_.size()) {
    throw OutOfVocabularyError("dense id " + std::to_string(dense) + " outside id map");
  }
  return original_of_dense_[static_cast<std::size_t>(dense - 1)];
}

ItemId IdMap::dense(ItemId original) const {
  auto it = dense_of_original_.find(original);
  if (it == dense_of_original_.end()) {
    throw OutOfVocabularyError("original id " + std::to_string(original) + " not in id map");
  }
  return it->second;
}

Reindexed reindex(const Corpus& corpus) {
  Reindexed out;
  out.corpus = corpus;
  std::unordered_map<ItemId, ItemId> dense_of;
  std::vector<ItemId> originals;
  for (auto& s : out.corpus.sequences) {
    for (ItemId& id : s.items) {
      auto [it, inserted] = dense_of.emplace(id, static_cast<ItemId>(originals.size() + 1));
      if (inserted) originals.push_back(id);
      id = it->second;
    }
  }
  out.corpus.item_count = static_cast<ItemId>(originals.size());
  out.id_map = IdMap(std::move(originals));
  return out;
}

SplitReport split_leave_one_out(const Corpus& corpus) {
  SplitReport report;
  report.corpus.item_count = corpus.item_count;
  for (const auto& s : corpus.sequences) {
    if (s.items.size() < 3) {
      ++report.dropped_users;
      continue;
    }
    report.corpus.sequences.push_back(s);
  }
  if (report.corpus.sequences.empty()) throw EmptyCorpusError("no sequence has 3 or more items");
  report.corpus.split = true;
  return report;
}

std::vector<TrainingInstance> segment(std::span<const ItemId> sequence, std::size_t n) {
  std::vector<TrainingInstance> out;
  if (sequence.size() < 2 || n == 0) return out;
  out.reserve(sequence.size() - 1);
  for (std::size_t t = 1; t < sequence.size(); ++t) {
    const std::size_t len = std::min(t, n);
    TrainingInstance inst;
    inst.instance_id = static_cast<InstanceId>(t - 1);
    inst.input.assign(sequence.begin() + static_cast<std::ptrdiff_t>(t - len),
                      sequence.begin() + static_cast<std::ptrdiff_t>(t));
    inst.target = sequence[t];
    out.push_back(std::move(inst));
  }
  return out;
}

SegmentedCorpus segment_corpus(const Corpus& corpus, std::size_t n) {
  SegmentedCorpus out;
  for (std::size_t u = 0; u < corpus.user_count(); ++u) {
    const auto train = corpus.view(u).train;
    if (train.size() < 2) {
      ++out.skipped_users;
      continue;
    }
    for (auto& inst : segment(train, n)) {
      inst.instance_id = static_cast<InstanceId>(out.instances.size());
      inst.source_user = u;
      out.instances.push_back(std::move(inst));
    }
  }
  return out;
}

std::span<const InstanceId> TargetIndex::bucket(ItemId target) const {
  auto it = buckets_.find(target);
  if (it == buckets_.end()) return {};
  return it->second;
}

TargetIndex build_target_index(std::span<const TrainingInstance> instances) {
  TargetIndex index;
  for (const auto& inst : instances) index.buckets_[inst.target].push_back(inst.instance_id);
  for (auto& [target, ids] : index.buckets_) std::sort(ids.begin(), ids.end());
  index.nonempty_ = index.buckets_.size();
  index.total_ = instances.size();
  return index;
}

InstanceId sample_positive(const TargetIndex& index, const TrainingInstance& anchor, Rng& rng) {
  const auto bucket = index.bucket(anchor.target);
  auto pos = std::lower_bound(bucket.begin(), bucket.end(), anchor.instance_id);
  if (pos == bucket.end() || *pos != anchor.instance_id) {
    throw IndexIntegrityError("instance " + std::to_string(anchor.instance_id) +
                              " missing from bucket of target " + std::to_string(anchor.target));
  }
  if (bucket.size() == 1) return anchor.instance_id;
  const auto anchor_pos = static_cast<std::size_t>(pos - bucket.begin());
  std::uniform_int_distribution<std::size_t> pick(0, bucket.size() - 2);
  std::size_t j = pick(rng);
  if (j >= anchor_pos) ++j;
  return bucket[j];
}

Preprocessed preprocess(const Corpus& raw, std::size_t min_count) {
  Reindexed dense = reindex(five_core_filter(raw, min_count));
  SplitReport split = split_leave_one_out(dense.corpus);
  return Preprocessed{std::move(split.corpus), std::move(dense.id_map), split.dropped_users};
}

void write_dataset(const fs::path& dir, const Corpus& corpus, const IdMap& id_map) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "sequences.txt", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "sequences.txt").string());
    for (const auto& s : corpus.sequences) {
      out << s.user_id;
      for (ItemId id : s.items) out << ' ' << id;
      out << '\n';
    }
  }
  {
    json j;
    j["item_count"] = id_map.size();
    j["original_ids"] = id_map.originals();
    std::ofstream out(dir / "id_map.json", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "id_map.json").string());
    out << j.dump() << '\n';
  }
  {
    const CorpusStats st = compute_stats(corpus);
    json j;
    j["users"] = st.users;
    j["items"] = st.items;
    j["actions"] = st.actions;
    j["avg_actions_per_user"] = st.avg_actions_per_user;
    j["avg_actions_per_item"] = st.avg_actions_per_item;
    j["sparsity"] = st.sparsity;
    std::ofstream out(dir / "stats.json", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "stats.json").string());
    out << j.dump(2) << '\n';
  }
}

Corpus read_dataset(const fs::path& dir) {
  const auto path = dir / "sequences.txt";
  if (!fs::exists(path)) throw IoError("dataset file not found: " + path.string());
  Corpus corpus = load_interactions(path);
  const IdMap map = read_id_map(dir);
  if (static_cast<std::size_t>(corpus.item_count) > map.size()) {
    throw InputError("sequences reference item " + std::to_string(corpus.item_count) +
                     " beyond id map of size " + std::to_string(map.size()));
  }
  corpus.item_count = static_cast<ItemId>(map.size());
  auto report = split_leave_one_out(corpus);
  return std::move(report.corpus);
}

IdMap read_id_map(const fs::path& dir) {
  const auto path = dir / "id_map.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
    return IdMap(j.at("original_ids").get<std::vector<ItemId>>());
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

}  // namespace icsrec
