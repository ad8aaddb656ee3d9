#include <doctest.h>

#include <algorithm>
#include <limits>

#include "icsrec/intent.hpp"
#include "test_util.hpp"

using namespace icsrec;

namespace {

Mat two_blobs(std::size_t per_blob, const Vec& a, const Vec& b, double spread, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, spread);
  Mat out(static_cast<Eigen::Index>(2 * per_blob), a.size());
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const Vec& mean = r < static_cast<Eigen::Index>(per_blob) ? a : b;
    for (Eigen::Index c = 0; c < out.cols(); ++c) out(r, c) = mean(c) + noise(rng);
  }
  return out;
}

std::int32_t scan_nearest(const Mat& centroids, const Vec& x) {
  std::int32_t best = -1;
  double best_dist = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
    double dist = 0.0;
    for (Eigen::Index j = 0; j < x.size(); ++j) dist += (x(j) - centroids(k, j)) * (x(j) - centroids(k, j));
    if (dist < best_dist) {
      best_dist = dist;
      best = static_cast<std::int32_t>(k);
    }
  }
  return best;
}

}  // namespace

TEST_CASE("inertia never increases across Lloyd iterations") {
  std::mt19937_64 rng(404);
  std::uniform_int_distribution<int> ndist(5, 80), ddist(1, 6), kdist(1, 10);
  for (int rep = 0; rep < 50; ++rep) {
    const Mat x = testutil::random_mat(ndist(rng), ddist(rng), rng);
    KMeansOptions opts;
    opts.k = static_cast<std::size_t>(kdist(rng));
    opts.max_iters = 30;
    opts.seed = static_cast<std::uint64_t>(rep);
    const PrototypeSet p = fit_prototypes(x, opts);
    REQUIRE(!p.inertia_history.empty());
    for (std::size_t i = 1; i < p.inertia_history.size(); ++i) {
      CHECK(p.inertia_history[i] <= p.inertia_history[i - 1] + 1e-12);
    }
    CHECK(p.k() == std::min<std::size_t>(opts.k, static_cast<std::size_t>(x.rows())));
    CHECK(p.assignments.size() == static_cast<std::size_t>(x.rows()));
  }
}

TEST_CASE("two well separated blobs are recovered") {
  std::mt19937_64 rng(17);
  Vec a(3), b(3);
  a << 2.0, -1.0, 0.5;
  b << -3.0, 4.0, 1.0;
  const Mat x = two_blobs(200, a, b, 0.1, rng);
  KMeansOptions opts;
  opts.k = 2;
  opts.seed = 3;
  const PrototypeSet p = fit_prototypes(x, opts);
  REQUIRE(p.k() == 2);
  const Vec c0 = p.centroids.row(0).transpose(), c1 = p.centroids.row(1).transpose();
  const bool straight = (c0 - a).norm() < (c0 - b).norm();
  const Vec& near_a = straight ? c0 : c1;
  const Vec& near_b = straight ? c1 : c0;
  CHECK((near_a - a).cwiseAbs().maxCoeff() < 0.05);
  CHECK((near_b - b).cwiseAbs().maxCoeff() < 0.05);
  const std::int32_t first = p.assignments[0];
  for (std::size_t i = 0; i < 200; ++i) CHECK(p.assignments[i] == first);
  for (std::size_t i = 200; i < 400; ++i) CHECK(p.assignments[i] != first);
}

TEST_CASE("query agrees with an exhaustive scan") {
  std::mt19937_64 rng(23);
  for (int rep = 0; rep < 30; ++rep) {
    const Mat x = testutil::random_mat(40, 4, rng);
    KMeansOptions opts;
    opts.k = 6;
    opts.seed = static_cast<std::uint64_t>(rep);
    const PrototypeSet p = fit_prototypes(x, opts);
    const Mat queries = testutil::random_mat(25, 4, rng);
    Mat gathered;
    const auto ids = query_rows(queries, p, &gathered);
    for (Eigen::Index r = 0; r < queries.rows(); ++r) {
      const Vec q = queries.row(r).transpose();
      const PrototypeHit hit = query(q, p);
      CHECK(hit.cluster == scan_nearest(p.centroids, q));
      CHECK(ids[static_cast<std::size_t>(r)] == hit.cluster);
      CHECK(gathered.row(r) == p.centroids.row(hit.cluster));
      CHECK(hit.distance == doctest::Approx((q - hit.centroid).squaredNorm()).epsilon(1e-12));
    }
  }
}

TEST_CASE("query ties go to the smaller cluster id") {
  PrototypeSet p;
  p.centroids = Mat(3, 2);
  p.centroids << 1, 0, -1, 0, 1, 0;
  Vec q(2);
  q << 0, 1;
  CHECK(query(q, p).cluster == 0);
  q << 1, 0;
  CHECK(query(q, p).cluster == 0);
}

TEST_CASE("normalized prototypes live on the unit sphere") {
  std::mt19937_64 rng(29);
  const Mat x = testutil::random_mat(30, 3, rng, 5.0);
  KMeansOptions opts;
  opts.k = 3;
  opts.normalize = true;
  const PrototypeSet p = fit_prototypes(x, opts);
  Vec q = x.row(4).transpose();
  const auto a = query(q, p).cluster;
  CHECK(query(q * 7.5, p).cluster == a);
  for (Eigen::Index k = 0; k < 3; ++k) CHECK(p.centroids.row(k).norm() <= 1.0 + 1e-12);
}

TEST_CASE("clustering is deterministic in its seed") {
  std::mt19937_64 rng(31);
  const Mat x = testutil::random_mat(60, 4, rng);
  KMeansOptions opts;
  opts.k = 5;
  opts.seed = 8;
  const PrototypeSet a = fit_prototypes(x, opts), b = fit_prototypes(x, opts);
  CHECK(a.centroids == b.centroids);
  CHECK(a.assignments == b.assignments);
}

TEST_CASE("clustering edge cases") {
  SUBCASE("K larger than the number of rows is capped") {
    Mat x(3, 2);
    x << 0, 0, 1, 1, 2, 2;
    KMeansOptions opts;
    opts.k = 10;
    const PrototypeSet p = fit_prototypes(x, opts);
    CHECK(p.k() == 3);
    CHECK(p.inertia() == doctest::Approx(0.0));
  }
  SUBCASE("identical rows") {
    const Mat x = Mat::Constant(8, 2, 1.5);
    KMeansOptions opts;
    opts.k = 3;
    const PrototypeSet p = fit_prototypes(x, opts);
    CHECK(p.inertia() == 0.0);
    Vec q(2);
    q << 1.5, 1.5;
    CHECK(query(q, p).distance == 0.0);
  }
  SUBCASE("invalid input") {
    KMeansOptions opts;
    CHECK_THROWS_AS(fit_prototypes(Mat(0, 2), opts), InputError);
    opts.k = 0;
    CHECK_THROWS_AS(fit_prototypes(Mat::Zero(3, 2), opts), InputError);
    opts.k = 2;
    Mat bad = Mat::Zero(3, 2);
    bad(1, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(fit_prototypes(bad, opts), NumericError);
  }
  SUBCASE("unfitted and mismatched queries") {
    CHECK_THROWS_AS(query(Vec::Zero(2), PrototypeSet{}), StateError);
    PrototypeSet p;
    p.centroids = Mat::Zero(2, 3);
    CHECK_THROWS_AS(query(Vec::Zero(2), p), InputError);
  }
}

TEST_CASE("prototype files round trip") {
  testutil::TempDir dir("protos");
  std::mt19937_64 rng(37);
  const Mat x = testutil::random_mat(20, 3, rng);
  KMeansOptions opts;
  opts.k = 4;
  opts.seed = 99;
  opts.normalize = true;
  PrototypeSet p = fit_prototypes(x, opts);
  p.centroids = p.centroids.cast<float>().cast<double>();
  save_prototypes(dir.path(), p);
  const PrototypeSet q = load_prototypes(dir.path());
  CHECK(q.centroids == p.centroids);
  CHECK(q.seed == 99);
  CHECK(q.normalize);
  CHECK(q.fitted_on == 20);
  CHECK(q.iterations_run == p.iterations_run);
  CHECK(q.inertia() == p.inertia());
  CHECK_THROWS_AS(load_prototypes(dir / "missing"), IoError);
}
