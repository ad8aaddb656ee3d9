#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "icsrec/autograd.hpp"
#include "icsrec/common.hpp"
#include "icsrec/intent.hpp"

namespace icsrec {

enum class Reduction { kMean, kSum };

/// Row i of view1 and row i of view2 form a positive pair; labels[i] is the
/// pair's label (target item for CICL, cluster id for FICL).
struct ContrastiveBatch {
  Mat view1;
  Mat view2;
  std::vector<std::int64_t> labels;
  double temperature = 1.0;
};

struct ContrastiveOptions {
  Reduction reduction = Reduction::kMean;
  /// Exclude same-label views of other pairs from each denominator.
  bool false_negative_mask = true;
  /// FICL only: contrast (h1, c1) and (h2, c2) pairs in one 4B-view pool
  /// instead of two separate 2B-view pools.
  bool ficl_shared_pool = false;
};

struct LossBreakdown {
  double rec = 0.0;
  double cicl = 0.0;
  double ficl = 0.0;
  double total = 0.0;
  double lambda = 0.0;
  double beta = 0.0;
};

double similarity(std::span<const double> x, std::span<const double> y);

/// Two-term masked contrastive loss per pair, before reduction.
std::vector<double> masked_info_nce_terms(const ContrastiveBatch& batch, const ContrastiveOptions& options = {});

double masked_info_nce(const ContrastiveBatch& batch, const ContrastiveOptions& options = {});

struct ContrastiveGrad {
  double loss = 0.0;
  Mat d_view1;
  Mat d_view2;
};

ContrastiveGrad masked_info_nce_grad(const ContrastiveBatch& batch, const ContrastiveOptions& options = {});

double cicl_loss(const Mat& h1, const Mat& h2, std::span<const ItemId> targets, double tau,
                 const ContrastiveOptions& options = {});

double ficl_loss(const Mat& h1, const Mat& h2, const PrototypeSet& prototypes, double tau,
                 const ContrastiveOptions& options = {});

/// -scores[g - 1] + logsumexp(scores); scores[i] belongs to item i + 1.
double cross_entropy_from_scores(std::span<const double> scores, ItemId g);

/// Softmax cross-entropy of intent . M^T over items 1..item_count (row 0 of
/// the item table is padding and never scored).
double rec_loss(const Eigen::Ref<const Vec>& intent, const Mat& item_embeddings, ItemId g);

struct RecGrad {
  double loss = 0.0;       // mean over the batch
  Mat d_intents;           // B x d
  Mat d_item_embeddings;   // (item_count + 1) x d, row 0 zero
};

RecGrad rec_loss_grad(const Mat& intents, const Mat& item_embeddings, std::span<const ItemId> targets);

LossBreakdown total_loss(double rec, double cicl, double ficl, double lambda, double beta);

namespace ad {

/// Mean rec loss over the batch, differentiable in intents and the item table.
Var rec_loss(Tape& tape, Var intents, Var item_embeddings, std::span<const ItemId> targets);

Var masked_info_nce(Tape& tape, Var view1, Var view2, std::vector<std::int64_t> labels, double temperature,
                    const ContrastiveOptions& options = {});

}  // namespace ad

}  // namespace icsrec
