#include "icsrec/intent.hpp"

#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "icsrec/encoder.hpp"

namespace icsrec {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Mat normalized_rows(const Mat& m) {
  Mat out = m;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double norm = out.row(r).norm();
    if (norm > 0.0) out.row(r) /= norm;
  }
  return out;
}

// Nearest centroid by explicit scan; ties resolve to the lowest index.
std::pair<std::int32_t, double> nearest(const Mat& centroids, const double* x, Eigen::Index d) {
  std::int32_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
    const double* c = centroids.row(k).data();
    double dist = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const double diff = x[j] - c[j];
      dist += diff * diff;
    }
    if (dist < best_dist) {
      best_dist = dist;
      best = static_cast<std::int32_t>(k);
    }
  }
  return {best, best_dist};
}

Mat kmeans_pp_init(const Mat& x, std::size_t k, Rng& rng) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  Mat centroids(static_cast<Eigen::Index>(k), d);
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  centroids.row(0) = x.row(first(rng));
  std::vector<double> min_dist(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) min_dist[static_cast<std::size_t>(i)] = (x.row(i) - centroids.row(0)).squaredNorm();
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : min_dist) total += v;
    Eigen::Index pick = 0;
    if (total > 0.0) {
      std::discrete_distribution<Eigen::Index> weighted(min_dist.begin(), min_dist.end());
      pick = weighted(rng);
    } else {
      pick = first(rng);
    }
    centroids.row(static_cast<Eigen::Index>(c)) = x.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double dist = (x.row(i) - centroids.row(static_cast<Eigen::Index>(c))).squaredNorm();
      auto& slot = min_dist[static_cast<std::size_t>(i)];
      if (dist < slot) slot = dist;
    }
  }
  return centroids;
}

}  // namespace

PrototypeSet fit_prototypes(const Mat& reprs, const KMeansOptions& options) {
  if (reprs.rows() < 1) throw InputError("k-means needs at least one row");
  if (options.k < 1) throw InputError("k-means needs K >= 1");
  if (options.max_iters < 1) throw InputError("k-means needs max_iters >= 1");
  if (!reprs.allFinite()) throw NumericError("k-means input contains non-finite values");

  const Mat x = options.normalize ? normalized_rows(reprs) : reprs;
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  const std::size_t k = std::min<std::size_t>(options.k, static_cast<std::size_t>(n));

  Rng rng(options.seed);
  PrototypeSet out;
  out.seed = options.seed;
  out.normalize = options.normalize;
  out.fitted_on = static_cast<std::size_t>(n);
  out.centroids = kmeans_pp_init(x, k, rng);
  out.assignments.assign(static_cast<std::size_t>(n), -1);

  std::vector<double> dist(static_cast<std::size_t>(n));
  std::vector<std::int32_t> previous;
  for (std::size_t iter = 1; iter <= options.max_iters; ++iter) {
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      auto [c, dd] = nearest(out.centroids, x.row(i).data(), d);
      out.assignments[static_cast<std::size_t>(i)] = c;
      dist[static_cast<std::size_t>(i)] = dd;
      inertia += dd;
    }
    out.inertia_history.push_back(inertia);
    out.iterations_run = iter;
    if (out.assignments == previous) break;

    std::vector<std::size_t> counts(k, 0);
    for (auto c : out.assignments) ++counts[static_cast<std::size_t>(c)];
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      Eigen::Index far = 0;
      for (Eigen::Index i = 1; i < n; ++i) {
        if (dist[static_cast<std::size_t>(i)] > dist[static_cast<std::size_t>(far)]) far = i;
      }
      const auto old = static_cast<std::size_t>(out.assignments[static_cast<std::size_t>(far)]);
      if (counts[old] <= 1) continue;  // every point is already a singleton
      --counts[old];
      ++counts[c];
      out.assignments[static_cast<std::size_t>(far)] = static_cast<std::int32_t>(c);
      dist[static_cast<std::size_t>(far)] = 0.0;
    }

    Mat sums = Mat::Zero(static_cast<Eigen::Index>(k), d);
    for (Eigen::Index i = 0; i < n; ++i) sums.row(out.assignments[static_cast<std::size_t>(i)]) += x.row(i);
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) out.centroids.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / double(counts[c]);
    }
    previous = out.assignments;
  }
  return out;
}

PrototypeHit query(const Eigen::Ref<const Vec>& h, const PrototypeSet& prototypes) {
  if (!prototypes.fitted()) throw StateError("prototype set has not been fitted");
  if (h.size() != prototypes.centroids.cols()) throw InputError("query dimension does not match prototypes");
  Vec x = h;
  if (prototypes.normalize && x.norm() > 0.0) x /= x.norm();
  auto [c, dist] = nearest(prototypes.centroids, x.data(), x.size());
  return PrototypeHit{c, prototypes.centroids.row(c).transpose(), dist};
}

std::vector<std::int32_t> query_rows(const Mat& rows, const PrototypeSet& prototypes, Mat* centroids_out) {
  if (!prototypes.fitted()) throw StateError("prototype set has not been fitted");
  const Mat x = prototypes.normalize ? normalized_rows(rows) : rows;
  std::vector<std::int32_t> ids(static_cast<std::size_t>(x.rows()));
  if (centroids_out != nullptr) centroids_out->resize(x.rows(), prototypes.centroids.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    auto [c, dist] = nearest(prototypes.centroids, x.row(i).data(), x.cols());
    ids[static_cast<std::size_t>(i)] = c;
    if (centroids_out != nullptr) centroids_out->row(i) = prototypes.centroids.row(c);
  }
  return ids;
}

void save_prototypes(const fs::path& dir, const PrototypeSet& prototypes) {
  fs::create_directories(dir);
  write_f32_file(dir / "prototypes.f32", prototypes.centroids);
  json j;
  j["K"] = prototypes.k();
  j["d"] = prototypes.centroids.cols();
  j["seed"] = prototypes.seed;
  j["iterations_run"] = prototypes.iterations_run;
  j["inertia"] = prototypes.inertia();
  j["fitted_on"] = prototypes.fitted_on;
  j["normalize"] = prototypes.normalize;
  std::ofstream out(dir / "prototypes.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "prototypes.json").string());
  out << j.dump(2) << '\n';
}

PrototypeSet load_prototypes(const fs::path& dir) {
  std::ifstream in(dir / "prototypes.json");
  if (!in) throw IoError("prototype sidecar not found in " + dir.string());
  PrototypeSet p;
  try {
    json j;
    in >> j;
    const auto k = j.at("K").get<Eigen::Index>();
    const auto d = j.at("d").get<Eigen::Index>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.iterations_run = j.at("iterations_run").get<std::size_t>();
    p.inertia_history = {j.at("inertia").get<double>()};
    p.fitted_on = j.value("fitted_on", std::size_t{0});
    p.normalize = j.value("normalize", false);
    if (k > 0) p.centroids = read_f32_file(dir / "prototypes.f32", k, d);
  } catch (const json::exception& e) {
    throw InputError((dir / "prototypes.json").string() + ": " + e.what());
  }
  return p;
}

}  // namespace icsrec
