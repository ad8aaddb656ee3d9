#include "icsrec/losses.hpp"

#include <cmath>
#include <limits>

namespace icsrec {

double similarity(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw InputError("similarity of vectors with dimensions " + std::to_string(x.size()) + " and " +
                     std::to_string(y.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

namespace {

void check_batch(const ContrastiveBatch& batch) {
  if (!(batch.temperature > 0.0)) throw InputError("temperature must be positive");
  if (batch.view1.rows() != batch.view2.rows() || batch.view1.cols() != batch.view2.cols()) {
    throw InputError("contrastive views must have equal shapes");
  }
  if (static_cast<std::size_t>(batch.view1.rows()) != batch.labels.size()) {
    throw InputError("one label per contrastive pair is required");
  }
  if (batch.view1.rows() < 1) throw InputError("contrastive batch is empty");
}

// Pooled 2B views: rows [0, B) are view1, rows [B, 2B) are view2.
struct Pool {
  Mat views;
  Mat gram;
  std::size_t pairs = 0;
};

Pool make_pool(const ContrastiveBatch& batch) {
  Pool p;
  p.pairs = static_cast<std::size_t>(batch.view1.rows());
  p.views.resize(2 * batch.view1.rows(), batch.view1.cols());
  p.views << batch.view1, batch.view2;
  p.gram.noalias() = p.views * p.views.transpose();
  return p;
}

bool is_candidate(std::size_t anchor, std::size_t other, std::size_t pairs, std::span<const std::int64_t> labels,
                  bool mask) {
  const std::size_t pa = anchor % pairs;
  const std::size_t po = other % pairs;
  if (po == pa) return other != anchor;  // the pair mate; the anchor itself never is
  return !mask || labels[po] != labels[pa];
}

// Directed term for one anchor; optionally writes d term / d logit per pooled view.
double directed_term(const Pool& pool, std::size_t anchor, std::span<const std::int64_t> labels, double tau,
                     bool mask, std::vector<double>* dlogits) {
  const std::size_t total = 2 * pool.pairs;
  const std::size_t mate = anchor < pool.pairs ? anchor + pool.pairs : anchor - pool.pairs;
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t x = 0; x < total; ++x) {
    if (is_candidate(anchor, x, pool.pairs, labels, mask)) {
      mx = std::max(mx, pool.gram(static_cast<Eigen::Index>(anchor), static_cast<Eigen::Index>(x)) / tau);
    }
  }
  double sum = 0.0;
  for (std::size_t x = 0; x < total; ++x) {
    if (is_candidate(anchor, x, pool.pairs, labels, mask)) {
      sum += std::exp(pool.gram(static_cast<Eigen::Index>(anchor), static_cast<Eigen::Index>(x)) / tau - mx);
    }
  }
  const double lse = mx + std::log(sum);
  const double pos = pool.gram(static_cast<Eigen::Index>(anchor), static_cast<Eigen::Index>(mate)) / tau;
  if (dlogits != nullptr) {
    dlogits->assign(total, 0.0);
    for (std::size_t x = 0; x < total; ++x) {
      if (is_candidate(anchor, x, pool.pairs, labels, mask)) {
        (*dlogits)[x] = std::exp(pool.gram(static_cast<Eigen::Index>(anchor), static_cast<Eigen::Index>(x)) / tau - lse);
      }
    }
    (*dlogits)[mate] -= 1.0;
  }
  return lse - pos;
}

double reduce(std::span<const double> terms, Reduction reduction, double mean_divisor) {
  double total = 0.0;
  for (double t : terms) total += t;
  return reduction == Reduction::kMean ? total / mean_divisor : total;
}

}  // namespace

std::vector<double> masked_info_nce_terms(const ContrastiveBatch& batch, const ContrastiveOptions& options) {
  check_batch(batch);
  const Pool pool = make_pool(batch);
  std::vector<double> terms(pool.pairs);
  for (std::size_t i = 0; i < pool.pairs; ++i) {
    terms[i] = directed_term(pool, i, batch.labels, batch.temperature, options.false_negative_mask, nullptr) +
               directed_term(pool, i + pool.pairs, batch.labels, batch.temperature, options.false_negative_mask, nullptr);
  }
  return terms;
}

double masked_info_nce(const ContrastiveBatch& batch, const ContrastiveOptions& options) {
  const auto terms = masked_info_nce_terms(batch, options);
  return reduce(terms, options.reduction, static_cast<double>(terms.size()));
}

ContrastiveGrad masked_info_nce_grad(const ContrastiveBatch& batch, const ContrastiveOptions& options) {
  check_batch(batch);
  const Pool pool = make_pool(batch);
  const std::size_t total = 2 * pool.pairs;
  const double scale = options.reduction == Reduction::kMean ? 1.0 / static_cast<double>(pool.pairs) : 1.0;
  const double tau = batch.temperature;
  // coeff(a, x) = d loss / d s(a, x); the Gram matrix is symmetric in (a, x).
  Mat coeff = Mat::Zero(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(total));
  std::vector<double> dlogits;
  double loss = 0.0;
  for (std::size_t a = 0; a < total; ++a) {
    loss += directed_term(pool, a, batch.labels, tau, options.false_negative_mask, &dlogits);
    for (std::size_t x = 0; x < total; ++x) coeff(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(x)) = dlogits[x];
  }
  coeff *= scale / tau;
  const Mat sym = coeff + coeff.transpose();
  const Mat dviews = sym * pool.views;
  ContrastiveGrad out;
  out.loss = loss * scale;
  const auto b = static_cast<Eigen::Index>(pool.pairs);
  out.d_view1 = dviews.topRows(b);
  out.d_view2 = dviews.bottomRows(b);
  return out;
}

double cicl_loss(const Mat& h1, const Mat& h2, std::span<const ItemId> targets, double tau,
                 const ContrastiveOptions& options) {
  ContrastiveBatch batch{h1, h2, std::vector<std::int64_t>(targets.begin(), targets.end()), tau};
  return masked_info_nce(batch, options);
}

double ficl_loss(const Mat& h1, const Mat& h2, const PrototypeSet& prototypes, double tau,
                 const ContrastiveOptions& options) {
  Mat c1, c2;
  const auto ids1 = query_rows(h1, prototypes, &c1);
  const auto ids2 = query_rows(h2, prototypes, &c2);
  if (options.ficl_shared_pool) {
    ContrastiveBatch joint;
    joint.view1.resize(2 * h1.rows(), h1.cols());
    joint.view1 << h1, h2;
    joint.view2.resize(2 * c1.rows(), c1.cols());
    joint.view2 << c1, c2;
    joint.labels.assign(ids1.begin(), ids1.end());
    joint.labels.insert(joint.labels.end(), ids2.begin(), ids2.end());
    joint.temperature = tau;
    // Mean over B keeps the scale of the two-addend form.
    const auto terms = masked_info_nce_terms(joint, options);
    double total = 0.0;
    for (double t : terms) total += t;
    return options.reduction == Reduction::kMean ? total / static_cast<double>(h1.rows()) : total;
  }
  ContrastiveBatch first{h1, c1, std::vector<std::int64_t>(ids1.begin(), ids1.end()), tau};
  ContrastiveBatch second{h2, c2, std::vector<std::int64_t>(ids2.begin(), ids2.end()), tau};
  return masked_info_nce(first, options) + masked_info_nce(second, options);
}

double cross_entropy_from_scores(std::span<const double> scores, ItemId g) {
  if (g < 1 || static_cast<std::size_t>(g) > scores.size()) {
    throw OutOfVocabularyError("target " + std::to_string(g) + " outside [1, " + std::to_string(scores.size()) + "]");
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (double s : scores) mx = std::max(mx, s);
  double sum = 0.0;
  for (double s : scores) sum += std::exp(s - mx);
  return mx + std::log(sum) - scores[static_cast<std::size_t>(g - 1)];
}

double rec_loss(const Eigen::Ref<const Vec>& intent, const Mat& item_embeddings, ItemId g) {
  const Eigen::Index m = item_embeddings.rows() - 1;
  if (g < 1 || g > m) throw OutOfVocabularyError("target " + std::to_string(g) + " outside [1, " + std::to_string(m) + "]");
  const Vec scores = item_embeddings.bottomRows(m) * intent;
  return cross_entropy_from_scores(std::span<const double>(scores.data(), static_cast<std::size_t>(m)), g);
}

RecGrad rec_loss_grad(const Mat& intents, const Mat& item_embeddings, std::span<const ItemId> targets) {
  const Eigen::Index m = item_embeddings.rows() - 1;
  const Eigen::Index b = intents.rows();
  if (static_cast<std::size_t>(b) != targets.size()) throw InputError("one target per intent is required");
  for (ItemId g : targets) {
    if (g < 1 || g > m) throw OutOfVocabularyError("target " + std::to_string(g) + " outside [1, " + std::to_string(m) + "]");
  }
  const auto items = item_embeddings.bottomRows(m);
  Mat probs = intents * items.transpose();  // B x m
  RecGrad out;
  double loss = 0.0;
  for (Eigen::Index r = 0; r < b; ++r) {
    const double mx = probs.row(r).maxCoeff();
    const double score_g = probs(r, targets[static_cast<std::size_t>(r)] - 1);
    probs.row(r).array() = (probs.row(r).array() - mx).exp();
    const double sum = probs.row(r).sum();
    loss += mx + std::log(sum) - score_g;
    probs.row(r) /= sum;
    probs(r, targets[static_cast<std::size_t>(r)] - 1) -= 1.0;
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  probs *= inv_b;
  out.loss = loss * inv_b;
  out.d_intents.noalias() = probs * items;
  out.d_item_embeddings = Mat::Zero(item_embeddings.rows(), item_embeddings.cols());
  out.d_item_embeddings.bottomRows(m).noalias() = probs.transpose() * intents;
  return out;
}

LossBreakdown total_loss(double rec, double cicl, double ficl, double lambda, double beta) {
  if (lambda < 0.0 || beta < 0.0) throw InputError("loss weights must be non-negative");
  return LossBreakdown{rec, cicl, ficl, rec + lambda * cicl + beta * ficl, lambda, beta};
}

namespace ad {

Var rec_loss(Tape& tape, Var intents, Var item_embeddings, std::span<const ItemId> targets) {
  auto grad = std::make_shared<RecGrad>(rec_loss_grad(tape.value(intents), tape.value(item_embeddings), targets));
  Mat out(1, 1);
  out(0, 0) = grad->loss;
  return tape.push(std::move(out), {intents, item_embeddings}, [intents, item_embeddings, grad](Tape& tp, const Mat& g) {
    if (tp.requires_grad(intents)) tp.grad_ref(intents) += g(0, 0) * grad->d_intents;
    if (tp.requires_grad(item_embeddings)) tp.grad_ref(item_embeddings) += g(0, 0) * grad->d_item_embeddings;
  });
}

Var masked_info_nce(Tape& tape, Var view1, Var view2, std::vector<std::int64_t> labels, double temperature,
                    const ContrastiveOptions& options) {
  ContrastiveBatch batch{tape.value(view1), tape.value(view2), std::move(labels), temperature};
  auto grad = std::make_shared<ContrastiveGrad>(masked_info_nce_grad(batch, options));
  Mat out(1, 1);
  out(0, 0) = grad->loss;
  return tape.push(std::move(out), {view1, view2}, [view1, view2, grad](Tape& tp, const Mat& g) {
    if (tp.requires_grad(view1)) tp.grad_ref(view1) += g(0, 0) * grad->d_view1;
    if (tp.requires_grad(view2)) tp.grad_ref(view2) += g(0, 0) * grad->d_view2;
  });
}

}  // namespace ad

}  // namespace icsrec
