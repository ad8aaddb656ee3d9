#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "icsrec/common.hpp"

namespace icsrec {

struct KMeansOptions {
  std::size_t k = 256;
  std::size_t max_iters = 20;
  std::uint64_t seed = 1;
  /// Cluster and query on L2-normalized rows.
  bool normalize = false;
};

/// Fine-grain intent prototypes.
struct PrototypeSet {
  Mat centroids;                    // K x d
  std::vector<std::int32_t> assignments;  // cluster of each fitted row
  std::vector<double> inertia_history;    // after each assignment step
  std::size_t fitted_on = 0;
  std::size_t iterations_run = 0;
  std::uint64_t seed = 0;
  bool normalize = false;

  bool fitted() const { return centroids.rows() > 0; }
  std::size_t k() const { return static_cast<std::size_t>(centroids.rows()); }
  double inertia() const { return inertia_history.empty() ? 0.0 : inertia_history.back(); }
};

/// Lloyd's algorithm on squared Euclidean distance with k-means++ seeding.
/// Stops after max_iters assignment steps or when assignments stop changing.
/// An empty cluster is moved onto the point farthest from its own centroid.
/// K is capped at the number of rows.
PrototypeSet fit_prototypes(const Mat& reprs, const KMeansOptions& options);

struct PrototypeHit {
  std::int32_t cluster = 0;
  Vec centroid;
  double distance = 0.0;  // squared
};

/// Nearest centroid; ties go to the smaller cluster id.
PrototypeHit query(const Eigen::Ref<const Vec>& h, const PrototypeSet& prototypes);

/// Batched query returning cluster ids and the gathered centroid rows.
std::vector<std::int32_t> query_rows(const Mat& rows, const PrototypeSet& prototypes, Mat* centroids_out);

/// prototypes.f32 (K x d, little-endian float32) + prototypes.json sidecar.
void save_prototypes(const std::filesystem::path& dir, const PrototypeSet& prototypes);
PrototypeSet load_prototypes(const std::filesystem::path& dir);

}  // namespace icsrec
