#include "icsrec/synth.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

namespace icsrec {

namespace fs = std::filesystem;

void SynthOptions::validate() const {
  if (users == 0 || items == 0 || intents == 0) throw InputError("users, items and intents must be positive");
  if (length < 2) throw InputError("sequence length must be at least 2");
  if (items > static_cast<std::size_t>(std::numeric_limits<ItemId>::max())) throw InputError("too many items");
  if (disjoint && intents > items) throw InputError("disjoint intents need at least one item each");
  if (support > items) throw InputError("support cannot exceed the item count");
  if (successors == 0) throw InputError("successors must be positive");
  if (!(restart >= 0.0 && restart <= 1.0)) throw InputError("restart must lie in [0, 1]");
  if (!(concentration > 0.0)) throw InputError("concentration must be positive");
}

namespace {

std::vector<double> dirichlet(std::size_t size, double alpha, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> w(size);
  double total = 0.0;
  for (auto& x : w) {
    x = gamma(rng) + 1e-12;
    total += x;
  }
  for (auto& x : w) x /= total;
  return w;
}

std::size_t draw(const std::vector<double>& weights, Rng& rng) {
  std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
  return dist(rng);
}

}  // namespace

SynthCorpus generate_synthetic(const SynthOptions& options) {
  options.validate();
  Rng rng = make_stream(options.seed, 0, 11);
  SynthCorpus out;
  out.options = options;
  out.corpus.item_count = static_cast<ItemId>(options.items);

  std::vector<ItemId> all(options.items);
  std::iota(all.begin(), all.end(), ItemId{1});
  std::shuffle(all.begin(), all.end(), rng);
  const std::size_t support_size = options.support == 0 ? std::max<std::size_t>(1, options.items / options.intents)
                                                        : options.support;

  for (std::size_t z = 0; z < options.intents; ++z) {
    LatentIntent intent;
    if (options.disjoint) {
      const std::size_t begin = z * options.items / options.intents;
      const std::size_t end = (z + 1) * options.items / options.intents;
      intent.support.assign(all.begin() + static_cast<std::ptrdiff_t>(begin),
                            all.begin() + static_cast<std::ptrdiff_t>(end));
    } else {
      std::vector<ItemId> pool = all;
      std::shuffle(pool.begin(), pool.end(), rng);
      intent.support.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(support_size));
    }
    std::sort(intent.support.begin(), intent.support.end());
    const std::size_t s = intent.support.size();
    intent.weights = dirichlet(s, options.concentration, rng);
    const std::size_t fan = std::min(options.successors, s);
    std::uniform_int_distribution<std::size_t> pick(0, s - 1);
    for (std::size_t i = 0; i < s; ++i) {
      std::vector<ItemId> succ;
      while (succ.size() < fan) {
        const ItemId cand = intent.support[pick(rng)];
        if (std::find(succ.begin(), succ.end(), cand) == succ.end()) succ.push_back(cand);
      }
      intent.next.push_back(std::move(succ));
      intent.next_prob.push_back(dirichlet(fan, options.concentration, rng));
    }
    out.intents.push_back(std::move(intent));
  }

  std::uniform_int_distribution<std::size_t> pick_intent(0, options.intents - 1);
  std::bernoulli_distribution jump(options.restart);
  for (std::size_t u = 0; u < options.users; ++u) {
    const std::size_t z = pick_intent(rng);
    const LatentIntent& intent = out.intents[z];
    InteractionSequence seq;
    seq.user_id = "u" + std::to_string(u + 1);
    std::size_t pos = draw(intent.weights, rng);
    seq.items.push_back(intent.support[pos]);
    while (seq.items.size() < options.length) {
      if (jump(rng)) {
        pos = draw(intent.weights, rng);
      } else {
        const ItemId next = intent.next[pos][draw(intent.next_prob[pos], rng)];
        pos = static_cast<std::size_t>(std::lower_bound(intent.support.begin(), intent.support.end(), next) -
                                       intent.support.begin());
      }
      seq.items.push_back(intent.support[pos]);
    }
    out.corpus.sequences.push_back(std::move(seq));
    out.user_intent.push_back(static_cast<std::int32_t>(z));
  }
  return out;
}

void write_synthetic(const fs::path& dir, const SynthCorpus& synth) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "interactions.txt", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "interactions.txt").string());
    for (const auto& seq : synth.corpus.sequences) {
      out << seq.user_id;
      for (ItemId id : seq.items) out << ' ' << id;
      out << '\n';
    }
  }
  {
    std::ofstream out(dir / "intents.tsv", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "intents.tsv").string());
    for (std::size_t u = 0; u < synth.user_intent.size(); ++u) {
      out << synth.corpus.sequences[u].user_id << '\t' << synth.user_intent[u] << '\n';
    }
  }
  const auto& o = synth.options;
  nlohmann::json j{{"users", o.users},       {"items", o.items},           {"intents", o.intents},
                   {"length", o.length},     {"seed", o.seed},             {"disjoint", o.disjoint},
                   {"support", o.support},   {"successors", o.successors}, {"restart", o.restart},
                   {"concentration", o.concentration}};
  nlohmann::json supports = nlohmann::json::array();
  for (const auto& intent : synth.intents) supports.push_back(intent.support);
  j["supports"] = std::move(supports);
  std::ofstream out(dir / "synth.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "synth.json").string());
  out << j.dump(2) << '\n';
}

}  // namespace icsrec
