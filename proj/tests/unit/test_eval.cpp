#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "icsrec/eval.hpp"
#include "test_util.hpp"

using namespace icsrec;

namespace {

Corpus random_split_corpus(std::size_t users, ItemId items, std::mt19937_64& rng) {
  Corpus raw;
  raw.item_count = items;
  std::uniform_int_distribution<int> len(3, 15);
  std::uniform_int_distribution<ItemId> pick(1, items);
  for (std::size_t u = 0; u < users; ++u) {
    InteractionSequence s{"u" + std::to_string(u), {}};
    const int l = len(rng);
    for (int i = 0; i < l; ++i) s.items.push_back(pick(rng));
    raw.sequences.push_back(std::move(s));
  }
  return split_leave_one_out(raw).corpus;
}

// Rank by sorting every item on (score descending, id ascending).
std::size_t sorted_rank(const std::vector<double>& scores, ItemId g) {
  std::vector<ItemId> order(scores.size());
  std::iota(order.begin(), order.end(), 1);
  std::sort(order.begin(), order.end(), [&](ItemId a, ItemId b) {
    const double sa = scores[static_cast<std::size_t>(a - 1)], sb = scores[static_cast<std::size_t>(b - 1)];
    return sa != sb ? sa > sb : a < b;
  });
  return static_cast<std::size_t>(std::find(order.begin(), order.end(), g) - order.begin()) + 1;
}

ModelShape small_shape(ItemId items, std::size_t n) {
  ModelShape s;
  s.d = 8;
  s.n = n;
  s.blocks = 1;
  s.heads = 2;
  s.ffn_dim = 8;
  s.item_count = items;
  return s;
}

}  // namespace

TEST_CASE("metric hand values") {
  auto check = [](std::size_t rank, std::size_t k, double hr, double ndcg) {
    const HitNdcg m = metrics_at_k(rank, k);
    CHECK(m.hr == hr);
    CHECK(m.ndcg == doctest::Approx(ndcg).epsilon(1e-15));
  };
  check(1, 5, 1.0, 1.0);
  check(3, 5, 1.0, 0.5);
  check(7, 5, 0.0, 0.0);
  check(5, 5, 1.0, 1.0 / std::log2(6.0));
  check(6, 5, 0.0, 0.0);
  CHECK_THROWS_AS(metrics_at_k(0, 5), InputError);
  CHECK_THROWS_AS(metrics_at_k(1, 0), InputError);
}

TEST_CASE("ranks agree with a full sort") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> coarse(0, 4);
  for (int rep = 0; rep < 300; ++rep) {
    const std::size_t m = 1 + static_cast<std::size_t>(rep % 40);
    std::vector<double> scores(m);
    // Coarse values force plenty of ties.
    for (auto& s : scores) s = rep % 2 == 0 ? coarse(rng) : std::normal_distribution<double>()(rng);
    const ItemId g = 1 + static_cast<ItemId>(rng() % m);
    CHECK(rank_from_scores(scores, g) == sorted_rank(scores, g));
  }
}

TEST_CASE("tied scores rank the smaller id first") {
  const std::vector<double> flat(10, 0.25);
  for (ItemId g = 1; g <= 10; ++g) CHECK(rank_from_scores(flat, g) == static_cast<std::size_t>(g));
  CHECK_THROWS_AS(rank_from_scores(flat, 0), OutOfVocabularyError);
  CHECK_THROWS_AS(rank_from_scores(flat, 11), OutOfVocabularyError);
}

TEST_CASE("noise injection") {
  const std::vector<ItemId> window{4, 9, 2, 7, 1};
  const std::vector<ItemId> history{4, 9, 2, 7, 1, 3, 8};
  SUBCASE("inserts ceil(ratio * length) unseen items and keeps the original order") {
    for (double ratio : {0.1, 0.2, 0.4, 0.5}) {
      Rng rng = make_stream(5, 0, 7);
      const auto out = inject_noise(window, history, ratio, 20, rng);
      const auto expected = static_cast<std::size_t>(std::ceil(ratio * 5.0 - 1e-9));
      CHECK(out.size() == window.size() + expected);
      std::vector<ItemId> kept;
      std::set<ItemId> added;
      for (ItemId id : out) {
        if (std::find(history.begin(), history.end(), id) != history.end()) {
          kept.push_back(id);
        } else {
          added.insert(id);
        }
      }
      CHECK(kept == window);
      CHECK(added.size() == expected);
      for (ItemId id : added) CHECK((id >= 1 && id <= 20));
    }
  }
  SUBCASE("ratio zero is the identity") {
    Rng rng = make_stream(5, 0, 7);
    CHECK(inject_noise(window, history, 0.0, 20, rng) == window);
  }
  SUBCASE("same stream gives the same corruption") {
    Rng a = make_stream(11, 3, 7), b = make_stream(11, 3, 7);
    CHECK(inject_noise(window, history, 0.4, 50, a) == inject_noise(window, history, 0.4, 50, b));
  }
  SUBCASE("invalid requests") {
    Rng rng = make_stream(5, 0, 7);
    CHECK_THROWS_AS(inject_noise(window, history, 1.0, 20, rng), InputError);
    CHECK_THROWS_AS(inject_noise(window, history, -0.1, 20, rng), InputError);
    CHECK_THROWS_AS(inject_noise(window, history, 0.5, 8, rng), InputError);
  }
}

TEST_CASE("evaluation with fixed scorers") {
  Corpus corpus;
  corpus.item_count = 6;
  corpus.sequences = {{"a", {1, 2, 3, 4}}, {"b", {5, 6, 1}}, {"c", {2, 3, 6, 5, 4}}};
  corpus.split = true;

  SUBCASE("an oracle that scores the label highest is perfect") {
    for (Split split : {Split::kValid, Split::kTest}) {
      std::size_t user = 0;
      Scorer oracle_scorer = [&](std::span<const std::span<const ItemId>> inputs) {
        Mat s = Mat::Zero(static_cast<Eigen::Index>(inputs.size()), 6);
        for (std::size_t i = 0; i < inputs.size(); ++i, ++user) {
          const SplitView v = corpus.view(user);
          s(static_cast<Eigen::Index>(i), (split == Split::kValid ? v.valid_label : v.test_label) - 1) = 1.0;
        }
        return s;
      };
      EvalOptions opts;
      opts.split = split;
      opts.batch_size = 2;
      const EvalReport r = evaluate_with(oracle_scorer, corpus, opts);
      for (auto k : opts.k_list) {
        CHECK(r.hr.at(k) == 1.0);
        CHECK(r.ndcg.at(k) == 1.0);
      }
      CHECK(r.user_count == 3);
    }
  }
  SUBCASE("a constant scorer ranks by id") {
    Scorer flat = [](std::span<const std::span<const ItemId>> inputs) {
      return Mat::Zero(static_cast<Eigen::Index>(inputs.size()), 6).eval();
    };
    EvalOptions opts;
    opts.k_list = {1, 4};
    const EvalReport r = evaluate_with(flat, corpus, opts);
    // Test labels 4, 1, 4.
    CHECK(r.hr.at(1) == doctest::Approx(1.0 / 3.0));
    CHECK(r.hr.at(4) == doctest::Approx(1.0));
    CHECK(r.ndcg.at(4) == doctest::Approx((2.0 / std::log2(5.0) + 1.0) / 3.0));
  }
  SUBCASE("the scorer sees the split input") {
    std::vector<std::vector<ItemId>> seen;
    Scorer spy = [&](std::span<const std::span<const ItemId>> inputs) {
      for (auto in : inputs) seen.emplace_back(in.begin(), in.end());
      return Mat::Zero(static_cast<Eigen::Index>(inputs.size()), 6).eval();
    };
    EvalOptions opts;
    opts.split = Split::kValid;
    opts.window = 2;
    evaluate_with(spy, corpus, opts);
    CHECK(seen == std::vector<std::vector<ItemId>>{{1, 2}, {5}, {3, 6}});
  }
  SUBCASE("invalid k lists") {
    Scorer flat = [](std::span<const std::span<const ItemId>> inputs) {
      return Mat::Zero(static_cast<Eigen::Index>(inputs.size()), 6).eval();
    };
    EvalOptions opts;
    opts.k_list = {};
    CHECK_THROWS_AS(evaluate_with(flat, corpus, opts), InputError);
    opts.k_list = {0};
    CHECK_THROWS_AS(evaluate_with(flat, corpus, opts), InputError);
  }
}

TEST_CASE("model evaluation matches a per-user ranking") {
  std::mt19937_64 rng(88);
  const Corpus corpus = random_split_corpus(30, 40, rng);
  const ModelParams params = ModelParams::initialize(small_shape(40, 4), 12, 0.3);
  EvalOptions opts;
  opts.k_list = {5, 10, 20};
  const EvalReport r = evaluate(params, corpus, opts);

  std::map<std::size_t, double> hr, ndcg;
  for (std::size_t u = 0; u < corpus.user_count(); ++u) {
    const SplitView v = corpus.view(u);
    const auto window = v.test_input.last(std::min<std::size_t>(4, v.test_input.size()));
    const std::vector<std::span<const ItemId>> one{window};
    const Mat intent = encode_intents(params, one);
    const std::size_t rank = rank_of_truth(intent.row(0).transpose(), params, v.test_label);
    for (auto k : opts.k_list) {
      hr[k] += metrics_at_k(rank, k).hr / 30.0;
      ndcg[k] += metrics_at_k(rank, k).ndcg / 30.0;
    }
  }
  for (auto k : opts.k_list) {
    CHECK(r.hr.at(k) == doctest::Approx(hr[k]).epsilon(1e-12));
    CHECK(r.ndcg.at(k) == doctest::Approx(ndcg[k]).epsilon(1e-12));
  }
}

TEST_CASE("NDCG never exceeds HR") {
  std::mt19937_64 rng(99);
  for (int rep = 0; rep < 5; ++rep) {
    const Corpus corpus = random_split_corpus(25, 30, rng);
    const ModelParams params = ModelParams::initialize(small_shape(30, 6), static_cast<std::uint64_t>(rep), 0.5);
    for (double ratio : {0.0, 0.2}) {
      EvalOptions opts;
      opts.split = rep % 2 == 0 ? Split::kTest : Split::kValid;
      opts.noise_ratio = ratio;
      opts.noise_seed = 4;
      const EvalReport r = evaluate(params, corpus, opts);
      for (auto k : opts.k_list) {
        CHECK(r.ndcg.at(k) <= r.hr.at(k));
        CHECK(r.hr.at(k) >= 0.0);
        CHECK(r.hr.at(k) <= 1.0);
      }
    }
  }
}

TEST_CASE("noisy evaluation is reproducible") {
  std::mt19937_64 rng(123);
  const Corpus corpus = random_split_corpus(20, 60, rng);
  const ModelParams params = ModelParams::initialize(small_shape(60, 5), 2, 0.5);
  EvalOptions opts;
  opts.noise_ratio = 0.4;
  opts.noise_seed = 9;
  const EvalReport a = evaluate(params, corpus, opts);
  const EvalReport b = evaluate(params, corpus, opts);
  CHECK(a.ndcg == b.ndcg);
  CHECK(a.hr == b.hr);
}

TEST_CASE("intent heat map") {
  const ModelParams params = ModelParams::initialize(small_shape(12, 4), 5, 0.3);
  const std::vector<ItemId> seq{3, 7, 1, 9, 12, 2};
  const Mat gram = intent_heatmap(params, seq);
  REQUIRE(gram.rows() == 4);
  REQUIRE(gram.cols() == 4);
  CHECK(gram.isApprox(gram.transpose(), 1e-12));
  for (Eigen::Index i = 0; i < 4; ++i) CHECK(gram(i, i) >= 0.0);
  CHECK(intent_heatmap(params, std::vector<ItemId>{5, 6}).rows() == 2);
  CHECK_THROWS_AS(intent_heatmap(params, std::vector<ItemId>{}), EmptyInputError);

  testutil::TempDir dir("heatmap");
  export_intent_heatmap(params, seq, dir / "nested/map.csv");
  std::istringstream in(testutil::read_text(dir / "nested/map.csv"));
  std::string line;
  Eigen::Index r = 0;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string cell;
    Eigen::Index c = 0;
    while (std::getline(row, cell, ',')) {
      CHECK(std::stod(cell) == gram(r, c));
      ++c;
    }
    CHECK(c == 4);
    ++r;
  }
  CHECK(r == 4);
}

TEST_CASE("report serialization") {
  EvalReport r;
  r.split = Split::kValid;
  r.noise_ratio = 0.2;
  r.k_list = {5, 20};
  r.hr = {{5, 0.5}, {20, 0.75}};
  r.ndcg = {{5, 0.25}, {20, 0.375}};
  r.user_count = 8;
  const auto j = report_to_json(r, "abcdef0123456789", 42);
  CHECK(j.at("split") == "valid");
  CHECK(j.at("noise_ratio") == 0.2);
  CHECK(j.at("hr").at("20") == 0.75);
  CHECK(j.at("ndcg").at("5") == 0.25);
  CHECK(j.at("user_count") == 8);
  CHECK(j.at("checkpoint_id") == "abcdef0123456789");
  CHECK(j.at("seed") == 42);
  CHECK(split_from_string("validation") == Split::kValid);
  CHECK(split_from_string("test") == Split::kTest);
  CHECK_THROWS_AS(split_from_string("train"), InputError);
}
