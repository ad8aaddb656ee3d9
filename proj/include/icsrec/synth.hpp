#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "icsrec/common.hpp"
#include "icsrec/corpus.hpp"

namespace icsrec {

/// Planted-intent generator settings.
struct SynthOptions {
  std::size_t users = 200;
  std::size_t items = 500;
  std::size_t intents = 4;
  std::size_t length = 20;
  std::uint64_t seed = 1;
  /// Per-intent supports partition the item set.
  bool disjoint = false;
  /// Items in each intent's support; 0 picks items / intents.
  std::size_t support = 0;
  /// Successors per item in an intent's Markov chain.
  std::size_t successors = 3;
  /// Probability of leaving the chain and redrawing from the intent's
  /// categorical distribution.
  double restart = 0.1;
  /// Dirichlet concentration of the categorical and transition weights.
  double concentration = 0.5;

  void validate() const;
};

struct LatentIntent {
  std::vector<ItemId> support;           // sorted
  std::vector<double> weights;           // categorical over support
  std::vector<std::vector<ItemId>> next;       // successors of support[i]
  std::vector<std::vector<double>> next_prob;  // transition weights of support[i]
};

struct SynthCorpus {
  Corpus corpus;                           // raw, unsplit
  std::vector<std::int32_t> user_intent;  // ground-truth intent per user
  std::vector<LatentIntent> intents;
  SynthOptions options;
};

/// Each user draws an intent uniformly, a first item from the intent's
/// categorical, then walks the intent's Markov chain.
SynthCorpus generate_synthetic(const SynthOptions& options);

/// interactions.txt (raw format), intents.tsv (user, intent) and synth.json.
void write_synthetic(const std::filesystem::path& dir, const SynthCorpus& synth);

}  // namespace icsrec
