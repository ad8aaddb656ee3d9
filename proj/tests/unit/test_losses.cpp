#include <doctest.h>

#include <cmath>

#include "../oracles.hpp"
#include "icsrec/intent.hpp"
#include "icsrec/losses.hpp"
#include "test_util.hpp"

using namespace icsrec;

namespace {

ContrastiveBatch make_batch(const Mat& x, const Mat& y, std::vector<std::int64_t> labels, double tau = 1.0) {
  return ContrastiveBatch{x, y, std::move(labels), tau};
}

ContrastiveOptions with(Reduction r, bool mask = true) {
  ContrastiveOptions o;
  o.reduction = r;
  o.false_negative_mask = mask;
  return o;
}

}  // namespace

TEST_CASE("similarity is a plain dot product") {
  const std::vector<double> a{1, 0}, b{0, 1}, c{1, 2}, d{3, 4};
  CHECK(similarity(a, b) == 0.0);
  CHECK(similarity(c, d) == 11.0);
  std::mt19937_64 rng(1);
  const Mat r = testutil::random_mat(2, 6, rng);
  const std::span<const double> x(r.data(), 6), y(r.data() + 6, 6);
  CHECK(similarity(x, y) == similarity(y, x));
  CHECK_THROWS_AS(similarity(a, std::vector<double>{1, 2, 3}), InputError);
}

TEST_CASE("masked contrastive loss hand cases") {
  SUBCASE("single pair has no negatives") {
    Mat x(1, 2), y(1, 2);
    x << 0.3, -1.0;
    y << 2.0, 0.5;
    CHECK(masked_info_nce(make_batch(x, y, {4}), {}) == 0.0);
  }
  SUBCASE("two opposite pairs") {
    Mat x(2, 1), y(2, 1);
    x << 1, -1;
    y << 1, -1;
    const double expect = 2.0 * std::log(1.0 + 2.0 * std::exp(-2.0));
    const auto terms = masked_info_nce_terms(make_batch(x, y, {5, 7}), {});
    CHECK(terms[0] == doctest::Approx(0.4791).epsilon(1e-4 / 0.4791));
    CHECK(terms[1] == doctest::Approx(expect).epsilon(1e-12));
    CHECK(masked_info_nce(make_batch(x, y, {5, 7}), {}) == doctest::Approx(0.4791).epsilon(1e-4 / 0.4791));
  }
  SUBCASE("shared labels remove the pairs from each other's pools") {
    std::mt19937_64 rng(8);
    const Mat x = testutil::random_mat(3, 4, rng), y = testutil::random_mat(3, 4, rng);
    const auto terms = masked_info_nce_terms(make_batch(x, y, {1, 1, 2}), {});
    // Pair 0 only competes with pair 2 and vice versa for pair 1.
    auto sub = [&](int a, int b) {
      Mat xs(2, 4), ys(2, 4);
      xs << x.row(a), x.row(b);
      ys << y.row(a), y.row(b);
      return masked_info_nce_terms(make_batch(xs, ys, {0, 1}), {})[0];
    };
    CHECK(terms[0] == doctest::Approx(sub(0, 2)).epsilon(1e-12));
    CHECK(terms[1] == doctest::Approx(sub(1, 2)).epsilon(1e-12));
  }
  SUBCASE("bad temperature and shapes") {
    Mat x(2, 1), y(2, 1);
    x << 1, 2;
    y << 1, 2;
    CHECK_THROWS_AS(masked_info_nce(make_batch(x, y, {1, 2}, 0.0), {}), InputError);
    CHECK_THROWS_AS(masked_info_nce(make_batch(x, y, {1}), {}), InputError);
    CHECK_THROWS_AS(masked_info_nce(make_batch(x, Mat(3, 1), {1, 2}), {}), InputError);
  }
}

TEST_CASE("masked contrastive loss agrees with the brute-force evaluator") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> bdist(1, 6), ddist(1, 8), ldist(0, 3);
  std::uniform_real_distribution<double> tdist(0.2, 2.0);
  for (int rep = 0; rep < 200; ++rep) {
    const int b = bdist(rng), d = ddist(rng);
    const Mat x = testutil::random_mat(b, d, rng), y = testutil::random_mat(b, d, rng);
    std::vector<std::int64_t> labels(static_cast<std::size_t>(b));
    for (auto& l : labels) l = ldist(rng);
    const double tau = tdist(rng);
    for (bool mask : {true, false}) {
      for (Reduction r : {Reduction::kMean, Reduction::kSum}) {
        const double got = masked_info_nce(make_batch(x, y, labels, tau), with(r, mask));
        const double want = oracle::info_nce(x, y, labels, tau, mask, r == Reduction::kMean);
        CHECK(std::abs(got - want) <= 1e-10 * std::max(1.0, std::abs(want)));
      }
    }
  }
}

TEST_CASE("masked contrastive loss properties") {
  std::mt19937_64 rng(99);
  const Mat x = testutil::random_mat(5, 3, rng), y = testutil::random_mat(5, 3, rng);
  const std::vector<std::int64_t> labels{1, 2, 1, 3, 4};
  const double base = masked_info_nce(make_batch(x, y, labels), {});

  SUBCASE("non-negative") { CHECK(base >= 0.0); }
  SUBCASE("swapping the views") { CHECK(masked_info_nce(make_batch(y, x, labels), {}) == doctest::Approx(base).epsilon(1e-12)); }
  SUBCASE("vacuous mask equals plain loss") {
    const std::vector<std::int64_t> distinct{1, 2, 3, 4, 5};
    CHECK(masked_info_nce(make_batch(x, y, distinct), with(Reduction::kMean, true)) ==
          masked_info_nce(make_batch(x, y, distinct), with(Reduction::kMean, false)));
  }
  SUBCASE("all labels equal gives zero") {
    CHECK(masked_info_nce(make_batch(x, y, {9, 9, 9, 9, 9}), {}) == doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("adding a same-label pair leaves an anchor's terms unchanged") {
    Mat x2(6, 3), y2(6, 3);
    x2 << x, testutil::random_mat(1, 3, rng);
    y2 << y, testutil::random_mat(1, 3, rng);
    std::vector<std::int64_t> l2 = labels;
    l2.push_back(3);
    const auto before = masked_info_nce_terms(make_batch(x, y, labels), {});
    const auto after = masked_info_nce_terms(make_batch(x2, y2, l2), {});
    CHECK(after[3] == doctest::Approx(before[3]).epsilon(1e-12));
  }
  SUBCASE("stable for large similarities") {
    const double v = masked_info_nce(make_batch(x * 100.0, y * 100.0, labels), {});
    CHECK(std::isfinite(v));
  }
}

TEST_CASE("contrastive gradients match finite differences") {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 10; ++rep) {
    Mat x = testutil::random_mat(4, 6, rng), y = testutil::random_mat(4, 6, rng);
    const std::vector<std::int64_t> labels{0, 1, 0, 2};
    for (Reduction r : {Reduction::kMean, Reduction::kSum}) {
      const auto opts = with(r);
      const ContrastiveGrad g = masked_info_nce_grad(make_batch(x, y, labels, 0.7), opts);
      CHECK(g.loss == doctest::Approx(masked_info_nce(make_batch(x, y, labels, 0.7), opts)).epsilon(1e-12));
      auto f = [&] { return masked_info_nce(make_batch(x, y, labels, 0.7), opts); };
      CHECK(oracle::relative_error(g.d_view1, oracle::numeric_gradient(x, f)) < 1e-6);
      CHECK(oracle::relative_error(g.d_view2, oracle::numeric_gradient(y, f)) < 1e-6);
    }
  }
}

TEST_CASE("coarse-grain loss uses targets as labels") {
  std::mt19937_64 rng(6);
  const Mat h1 = testutil::random_mat(4, 3, rng), h2 = testutil::random_mat(4, 3, rng);
  const std::vector<ItemId> targets{3, 8, 3, 1};
  CHECK(cicl_loss(h1, h2, targets, 1.0, {}) == masked_info_nce(make_batch(h1, h2, {3, 8, 3, 1}), {}));
  const std::vector<ItemId> same{2, 2, 2, 2};
  CHECK(cicl_loss(h1, h2, same, 1.0, {}) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("fine-grain loss") {
  std::mt19937_64 rng(12);
  SUBCASE("two addends against the nearest prototypes") {
    const Mat reps = testutil::random_mat(40, 3, rng);
    KMeansOptions km;
    km.k = 4;
    const PrototypeSet protos = fit_prototypes(reps, km);
    const Mat h1 = reps.topRows(6), h2 = reps.middleRows(6, 6);
    Mat c1, c2;
    const auto id1 = query_rows(h1, protos, &c1);
    const auto id2 = query_rows(h2, protos, &c2);
    const double want = oracle::info_nce(h1, c1, {id1.begin(), id1.end()}, 1.0, true, true) +
                        oracle::info_nce(h2, c2, {id2.begin(), id2.end()}, 1.0, true, true);
    CHECK(ficl_loss(h1, h2, protos, 1.0, {}) == doctest::Approx(want).epsilon(1e-10));

    ContrastiveOptions shared;
    shared.ficl_shared_pool = true;
    Mat hv(12, 3), cv(12, 3);
    hv << h1, h2;
    cv << c1, c2;
    std::vector<std::int64_t> ids(id1.begin(), id1.end());
    ids.insert(ids.end(), id2.begin(), id2.end());
    CHECK(ficl_loss(h1, h2, protos, 1.0, shared) ==
          doctest::Approx(oracle::info_nce(hv, cv, ids, 1.0, true, false) / 6.0).epsilon(1e-10));
  }
  SUBCASE("single row gives zero") {
    const Mat reps = testutil::random_mat(5, 2, rng);
    KMeansOptions km;
    km.k = 2;
    const PrototypeSet protos = fit_prototypes(reps, km);
    CHECK(ficl_loss(reps.topRows(1), reps.middleRows(1, 1), protos, 1.0, {}) == 0.0);
  }
  SUBCASE("loss falls as prototypes separate") {
    // Rows sit exactly on K = B distinct centroids spread along orthogonal axes.
    double previous = std::numeric_limits<double>::infinity();
    for (double scale : {0.5, 1.0, 2.0, 4.0}) {
      PrototypeSet protos;
      protos.centroids = Mat::Identity(4, 4) * scale;
      const Mat h = protos.centroids;
      const double loss = ficl_loss(h, h, protos, 1.0, {});
      CHECK(loss < previous);
      previous = loss;
    }
  }
  SUBCASE("rows in one cluster are masked from each other") {
    PrototypeSet protos;
    protos.centroids = Mat(2, 2);
    protos.centroids << 1, 0, 0, 1;
    Mat h(3, 2);
    h << 0.9, 0.1, 1.1, -0.2, 0.1, 0.8;
    Mat c1;
    const auto ids = query_rows(h, protos, &c1);
    CHECK(ids == std::vector<std::int32_t>{0, 0, 1});
    const double half = oracle::info_nce(h, c1, {0, 0, 1}, 1.0, true, true);
    CHECK(ficl_loss(h, h, protos, 1.0, {}) == doctest::Approx(2.0 * half).epsilon(1e-12));
  }
  SUBCASE("unfitted prototypes") {
    const Mat h = testutil::random_mat(2, 2, rng);
    CHECK_THROWS_AS(ficl_loss(h, h, PrototypeSet{}, 1.0, {}), StateError);
  }
}

TEST_CASE("recommendation loss") {
  SUBCASE("uniform scores") {
    const Mat items = Mat::Zero(5, 3);
    const Vec h = Vec::Ones(3);
    CHECK(rec_loss(h, items, 2) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("saturated correct score") {
    Mat items = Mat::Constant(101, 1, -10.0);
    items(0, 0) = 0.0;
    items(7, 0) = 10.0;
    Vec h(1);
    h << 1.0;
    CHECK(rec_loss(h, items, 7) == doctest::Approx(std::log1p(99.0 * std::exp(-20.0))).epsilon(1e-9));
  }
  SUBCASE("random instances match the direct softmax") {
    std::mt19937_64 rng(31);
    for (int rep = 0; rep < 50; ++rep) {
      const Mat items = testutil::random_mat(12, 5, rng);
      const Vec h = testutil::random_mat(5, 1, rng);
      const ItemId g = 1 + rep % 11;
      const double want = oracle::rec_loss(h, items, g);
      CHECK(std::abs(rec_loss(h, items, g) - want) <= 1e-10 * std::max(1.0, want));
    }
  }
  SUBCASE("shift invariance and large scores") {
    const std::vector<double> s{3.0, -1.0, 0.5, 2.0};
    const std::vector<double> t{1e4 + 3.0, 1e4 - 1.0, 1e4 + 0.5, 1e4 + 2.0};
    CHECK(cross_entropy_from_scores(s, 3) == doctest::Approx(cross_entropy_from_scores(t, 3)).epsilon(1e-9));
    const std::vector<double> huge{1e4, -1e4, 0.0};
    CHECK(std::isfinite(cross_entropy_from_scores(huge, 2)));
  }
  SUBCASE("target outside the item range") {
    const Mat items = Mat::Zero(5, 3);
    CHECK_THROWS_AS(rec_loss(Vec::Ones(3), items, 0), OutOfVocabularyError);
    CHECK_THROWS_AS(rec_loss(Vec::Ones(3), items, 5), OutOfVocabularyError);
  }
  SUBCASE("batched gradient matches finite differences") {
    std::mt19937_64 rng(41);
    Mat intents = testutil::random_mat(3, 4, rng);
    Mat items = testutil::random_mat(9, 4, rng);
    const std::vector<ItemId> targets{2, 8, 2};
    const RecGrad g = rec_loss_grad(intents, items, targets);
    auto f = [&] {
      double total = 0.0;
      for (Eigen::Index r = 0; r < 3; ++r) total += rec_loss(intents.row(r).transpose(), items, targets[static_cast<std::size_t>(r)]);
      return total / 3.0;
    };
    CHECK(g.loss == doctest::Approx(f()).epsilon(1e-12));
    CHECK(oracle::relative_error(g.d_intents, oracle::numeric_gradient(intents, f)) < 1e-6);
    CHECK(oracle::relative_error(g.d_item_embeddings, oracle::numeric_gradient(items, f)) < 1e-6);
    CHECK(g.d_item_embeddings.row(0).isZero(0.0));
  }
}

TEST_CASE("tape wrappers propagate the loss gradients") {
  std::mt19937_64 rng(77);
  Mat a = testutil::random_mat(2, 4, rng), b = testutil::random_mat(2, 4, rng), m = testutil::random_mat(6, 4, rng);
  const std::vector<ItemId> targets{1, 5};
  auto value = [&](ad::Tape& t, ad::Var va, ad::Var vb, ad::Var vm) {
    ad::Var rec = ad::rec_loss(t, va, vm, targets);
    ad::Var con = ad::masked_info_nce(t, va, vb, {1, 5}, 1.0, {});
    const std::vector<ad::Var> terms{rec, con};
    const std::vector<double> weights{1.0, 0.3};
    return ad::weighted_sum(t, terms, weights);
  };
  ad::Tape tape;
  ad::Var va = tape.leaf_ref(a), vb = tape.leaf_ref(b), vm = tape.leaf_ref(m);
  tape.backward(value(tape, va, vb, vm));
  auto f = [&] {
    ad::Tape t;
    return t.value(value(t, t.constant(a), t.constant(b), t.constant(m)))(0, 0);
  };
  CHECK(oracle::relative_error(tape.grad(va), oracle::numeric_gradient(a, f)) < 1e-6);
  CHECK(oracle::relative_error(tape.grad(vb), oracle::numeric_gradient(b, f)) < 1e-6);
  CHECK(oracle::relative_error(tape.grad(vm), oracle::numeric_gradient(m, f)) < 1e-6);
}

TEST_CASE("total loss") {
  const LossBreakdown l = total_loss(1.0, 2.0, 3.0, 0.3, 0.1);
  CHECK(l.total == doctest::Approx(1.9).epsilon(1e-15));
  CHECK(total_loss(2.5, 7.0, 9.0, 0.0, 0.0).total == 2.5);
  CHECK_THROWS_AS(total_loss(1, 1, 1, -0.1, 0.0), InputError);
  CHECK_THROWS_AS(total_loss(1, 1, 1, 0.0, -0.1), InputError);
}
