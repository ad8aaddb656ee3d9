#include "icsrec/autograd.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace icsrec::ad {

Var Tape::constant(Mat value) {
  Node node;
  node.owned = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Tape::leaf(Mat value) {
  Node node;
  node.owned = std::move(value);
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Tape::leaf_ref(const Mat& ref) {
  Node node;
  node.ref = &ref;
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

const Mat& Tape::value(Var v) const {
  const Node& node = nodes_[v.id];
  return node.ref != nullptr ? *node.ref : node.owned;
}

Mat Tape::grad(Var v) const {
  const Node& node = nodes_[v.id];
  if (node.has_grad) return node.grad;
  const Mat& val = value(v);
  return Mat::Zero(val.rows(), val.cols());
}

Mat& Tape::grad_ref(Var v) {
  Node& node = nodes_[v.id];
  if (!node.has_grad) {
    const Mat& val = value(v);
    node.grad = Mat::Zero(val.rows(), val.cols());
    node.has_grad = true;
  }
  return node.grad;
}

Var Tape::push(Mat value, std::span<const Var> parents, Backward fn) {
  Node node;
  node.owned = std::move(value);
  for (Var p : parents) node.requires_grad = node.requires_grad || nodes_[p.id].requires_grad;
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

void Tape::backward(Var out) {
  if (value(out).size() != 1) throw StateError("backward target must be a scalar");
  for (auto& node : nodes_) {
    node.has_grad = false;
    node.grad.resize(0, 0);
  }
  grad_ref(out)(0, 0) = 1.0;
  for (std::size_t i = out.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad || !node.backward) continue;
    // The closure may grow other nodes' grads but never this one's.
    const Mat g = node.grad;
    node.backward(*this, g);
  }
}

Var matmul(Tape& t, Var a, Var b) {
  Mat out = t.value(a) * t.value(b);
  return t.push(std::move(out), {a, b}, [a, b](Tape& tp, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad_ref(a).noalias() += g * tp.value(b).transpose();
    if (tp.requires_grad(b)) tp.grad_ref(b).noalias() += tp.value(a).transpose() * g;
  });
}

Var add(Tape& t, Var a, Var b) {
  Mat out = t.value(a) + t.value(b);
  return t.push(std::move(out), {a, b}, [a, b](Tape& tp, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad_ref(a) += g;
    if (tp.requires_grad(b)) tp.grad_ref(b) += g;
  });
}

Var add_bias(Tape& t, Var a, Var bias) {
  Mat out = t.value(a);
  out.rowwise() += t.value(bias).row(0);
  return t.push(std::move(out), {a, bias}, [a, bias](Tape& tp, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad_ref(a) += g;
    if (tp.requires_grad(bias)) tp.grad_ref(bias) += g.colwise().sum();
  });
}

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const Mat& in = t.value(x);
  const Eigen::Index rows = in.rows();
  const Eigen::Index cols = in.cols();
  auto xhat = std::make_shared<Mat>(rows, cols);
  auto inv_std = std::make_shared<Vec>(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = in.row(r).mean();
    const double var = (in.row(r).array() - mean).square().mean();
    (*inv_std)(r) = 1.0 / std::sqrt(var + eps);
    xhat->row(r) = (in.row(r).array() - mean) * (*inv_std)(r);
  }
  Mat out = xhat->array().rowwise() * t.value(gamma).row(0).array();
  out.rowwise() += t.value(beta).row(0);
  return t.push(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std](Tape& tp, const Mat& g) {
    if (tp.requires_grad(gamma)) tp.grad_ref(gamma) += (g.array() * xhat->array()).colwise().sum().matrix();
    if (tp.requires_grad(beta)) tp.grad_ref(beta) += g.colwise().sum();
    if (!tp.requires_grad(x)) return;
    Mat dxhat = g.array().rowwise() * tp.value(gamma).row(0).array();
    Mat& dx = tp.grad_ref(x);
    for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
      const double m1 = dxhat.row(r).mean();
      const double m2 = (dxhat.row(r).array() * xhat->row(r).array()).mean();
      dx.row(r).array() += (*inv_std)(r) * (dxhat.row(r).array() - m1 - xhat->row(r).array() * m2);
    }
  });
}

Var gelu(Tape& t, Var x) {
  const Mat& in = t.value(x);
  Mat out = in.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); });
  return t.push(std::move(out), {x}, [x](Tape& tp, const Mat& g) {
    const Mat& v = tp.value(x);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    Mat d = v.unaryExpr([inv_sqrt_2pi](double u) {
      return 0.5 * (1.0 + std::erf(u * std::numbers::sqrt2 / 2.0)) + u * inv_sqrt_2pi * std::exp(-0.5 * u * u);
    });
    tp.grad_ref(x).array() += g.array() * d.array();
  });
}

Var dropout(Tape& t, Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  const Mat& in = t.value(x);
  auto mask = std::make_shared<Mat>(in.rows(), in.cols());
  std::bernoulli_distribution keep(1.0 - rate);
  const double scale = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < mask->size(); ++i) mask->data()[i] = keep(rng) ? scale : 0.0;
  Mat out = in.cwiseProduct(*mask);
  return t.push(std::move(out), {x}, [x, mask](Tape& tp, const Mat& g) {
    tp.grad_ref(x) += g.cwiseProduct(*mask);
  });
}

Var gather_rows(Tape& t, Var table, std::span<const ItemId> ids) {
  const Mat& tab = t.value(table);
  Mat out(static_cast<Eigen::Index>(ids.size()), tab.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= tab.rows()) {
      throw OutOfVocabularyError("item id " + std::to_string(ids[r]) + " outside embedding table of " +
                                 std::to_string(tab.rows() - 1) + " items");
    }
    out.row(static_cast<Eigen::Index>(r)) = tab.row(ids[r]);
  }
  auto id_copy = std::make_shared<std::vector<ItemId>>(ids.begin(), ids.end());
  return t.push(std::move(out), {table}, [table, id_copy](Tape& tp, const Mat& g) {
    Mat& dt = tp.grad_ref(table);
    for (std::size_t r = 0; r < id_copy->size(); ++r) {
      const ItemId id = (*id_copy)[r];
      if (id != kPadId) dt.row(id) += g.row(static_cast<Eigen::Index>(r));
    }
  });
}

Var add_positions(Tape& t, Var x, Var pos, std::size_t batch) {
  const Mat& p = t.value(pos);
  const auto n = p.rows();
  Mat out = t.value(x);
  for (std::size_t b = 0; b < batch; ++b) out.middleRows(static_cast<Eigen::Index>(b) * n, n) += p;
  return t.push(std::move(out), {x, pos}, [x, pos, batch, n](Tape& tp, const Mat& g) {
    if (tp.requires_grad(x)) tp.grad_ref(x) += g;
    if (tp.requires_grad(pos)) {
      Mat& dp = tp.grad_ref(pos);
      for (std::size_t b = 0; b < batch; ++b) dp += g.middleRows(static_cast<Eigen::Index>(b) * n, n);
    }
  });
}

Var take_rows(Tape& t, Var x, std::vector<std::size_t> rows) {
  const Mat& in = t.value(x);
  Mat out(static_cast<Eigen::Index>(rows.size()), in.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = in.row(static_cast<Eigen::Index>(rows[i]));
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(rows));
  return t.push(std::move(out), {x}, [x, idx](Tape& tp, const Mat& g) {
    Mat& dx = tp.grad_ref(x);
    for (std::size_t i = 0; i < idx->size(); ++i) dx.row(static_cast<Eigen::Index>((*idx)[i])) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var causal_attention(Tape& t, Var q, Var k, Var v, std::span<const std::uint8_t> valid,
                     std::size_t batch, std::size_t n, std::size_t heads) {
  const Mat& Q = t.value(q);
  const Mat& K = t.value(k);
  const Mat& V = t.value(v);
  const auto d = Q.cols();
  const auto dh = d / static_cast<Eigen::Index>(heads);
  const auto ni = static_cast<Eigen::Index>(n);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<Mat>>(batch * heads);
  Mat out = Mat::Zero(Q.rows(), d);
  for (std::size_t b = 0; b < batch; ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * ni;
    const std::uint8_t* mask = valid.data() + b * n;
    for (std::size_t h = 0; h < heads; ++h) {
      const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
      Mat scores = Q.block(r0, c0, ni, dh) * K.block(r0, c0, ni, dh).transpose();
      Mat& P = (*probs)[b * heads + h];
      P = Mat::Zero(ni, ni);
      for (Eigen::Index i = 0; i < ni; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j <= i; ++j) {
          if (mask[j]) mx = std::max(mx, scores(i, j) * scale);
        }
        if (mx == -std::numeric_limits<double>::infinity()) continue;
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          if (!mask[j]) continue;
          P(i, j) = std::exp(scores(i, j) * scale - mx);
          sum += P(i, j);
        }
        P.row(i) /= sum;
      }
      out.block(r0, c0, ni, dh).noalias() = P * V.block(r0, c0, ni, dh);
    }
  }
  return t.push(std::move(out), {q, k, v}, [q, k, v, probs, batch, heads, ni, dh, scale](Tape& tp, const Mat& g) {
    const Mat& Qv = tp.value(q);
    const Mat& Kv = tp.value(k);
    const Mat& Vv = tp.value(v);
    const bool need_q = tp.requires_grad(q);
    const bool need_k = tp.requires_grad(k);
    const bool need_v = tp.requires_grad(v);
    for (std::size_t b = 0; b < batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * ni;
      for (std::size_t h = 0; h < heads; ++h) {
        const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
        const Mat& P = (*probs)[b * heads + h];
        const auto gO = g.block(r0, c0, ni, dh);
        if (need_v) tp.grad_ref(v).block(r0, c0, ni, dh).noalias() += P.transpose() * gO;
        if (!need_q && !need_k) continue;
        Mat dP = gO * Vv.block(r0, c0, ni, dh).transpose();
        Vec rowdot = (dP.array() * P.array()).rowwise().sum();
        Mat dS = P.array() * (dP.colwise() - rowdot).array();
        dS *= scale;
        if (need_q) tp.grad_ref(q).block(r0, c0, ni, dh).noalias() += dS * Kv.block(r0, c0, ni, dh);
        if (need_k) tp.grad_ref(k).block(r0, c0, ni, dh).noalias() += dS.transpose() * Qv.block(r0, c0, ni, dh);
      }
    }
  });
}

namespace {
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

Var gru_recurrence(Tape& t, Var gx, Var wh, Var bh, std::span<const std::uint8_t> valid,
                   std::size_t batch, std::size_t n) {
  const Mat& GX = t.value(gx);
  const Mat& WH = t.value(wh);
  const Mat& BH = t.value(bh);
  const Eigen::Index d = WH.rows();
  const auto B = static_cast<Eigen::Index>(batch);
  const auto ni = static_cast<Eigen::Index>(n);

  // Per-step caches, each B x d (gh_n is the hidden-side candidate pre-activation).
  struct StepCache {
    Mat h_prev, r, z, cand, gh_n;
  };
  auto cache = std::make_shared<std::vector<StepCache>>(n);
  auto mask = std::make_shared<std::vector<std::uint8_t>>(valid.begin(), valid.end());

  Mat out(B * ni, d);
  Mat h = Mat::Zero(B, d);
  for (Eigen::Index s = 0; s < ni; ++s) {
    StepCache& c = (*cache)[static_cast<std::size_t>(s)];
    c.h_prev = h;
    Mat gh = h * WH;
    gh.rowwise() += BH.row(0);
    c.r.resize(B, d);
    c.z.resize(B, d);
    c.cand.resize(B, d);
    c.gh_n = gh.middleCols(2 * d, d);
    for (Eigen::Index b = 0; b < B; ++b) {
      const Eigen::Index row = b * ni + s;
      for (Eigen::Index j = 0; j < d; ++j) {
        const double r = sigmoid(GX(row, j) + gh(b, j));
        const double z = sigmoid(GX(row, d + j) + gh(b, d + j));
        const double cand = std::tanh(GX(row, 2 * d + j) + r * gh(b, 2 * d + j));
        c.r(b, j) = r;
        c.z(b, j) = z;
        c.cand(b, j) = cand;
        if ((*mask)[static_cast<std::size_t>(row)]) h(b, j) = (1.0 - z) * cand + z * h(b, j);
      }
      out.row(row) = h.row(b);
    }
  }
  return t.push(std::move(out), {gx, wh, bh}, [gx, wh, bh, cache, mask, B, ni, d](Tape& tp, const Mat& g) {
    const Mat& WHv = tp.value(wh);
    Mat dh = Mat::Zero(B, d);
    Mat dgh(B, 3 * d);
    const bool need_gx = tp.requires_grad(gx);
    for (Eigen::Index s = ni; s-- > 0;) {
      const StepCache& c = (*cache)[static_cast<std::size_t>(s)];
      for (Eigen::Index b = 0; b < B; ++b) dh.row(b) += g.row(b * ni + s);
      dgh.setZero();
      Mat dh_prev = dh;
      for (Eigen::Index b = 0; b < B; ++b) {
        const Eigen::Index row = b * ni + s;
        if (!(*mask)[static_cast<std::size_t>(row)]) continue;
        for (Eigen::Index j = 0; j < d; ++j) {
          const double r = c.r(b, j), z = c.z(b, j), cand = c.cand(b, j);
          const double dhv = dh(b, j);
          const double dcand = dhv * (1.0 - z);
          const double dz = dhv * (c.h_prev(b, j) - cand);
          dh_prev(b, j) = dhv * z;
          const double da_n = dcand * (1.0 - cand * cand);
          const double dr = da_n * c.gh_n(b, j);
          const double da_r = dr * r * (1.0 - r);
          const double da_z = dz * z * (1.0 - z);
          dgh(b, j) = da_r;
          dgh(b, d + j) = da_z;
          dgh(b, 2 * d + j) = da_n * r;
          if (need_gx) {
            Mat& dgx = tp.grad_ref(gx);
            dgx(row, j) += da_r;
            dgx(row, d + j) += da_z;
            dgx(row, 2 * d + j) += da_n;
          }
        }
      }
      if (tp.requires_grad(wh)) tp.grad_ref(wh).noalias() += c.h_prev.transpose() * dgh;
      if (tp.requires_grad(bh)) tp.grad_ref(bh) += dgh.colwise().sum();
      dh_prev.noalias() += dgh * WHv.transpose();
      dh = std::move(dh_prev);
    }
  });
}

Var vstack(Tape& t, Var a, Var b) {
  const Mat& top = t.value(a);
  const Mat& bottom = t.value(b);
  if (top.cols() != bottom.cols()) throw InputError("vstack needs equal column counts");
  Mat out(top.rows() + bottom.rows(), top.cols());
  out << top, bottom;
  const auto split = top.rows();
  return t.push(std::move(out), {a, b}, [a, b, split](Tape& tp, const Mat& g) {
    if (tp.requires_grad(a)) tp.grad_ref(a) += g.topRows(split);
    if (tp.requires_grad(b)) tp.grad_ref(b) += g.bottomRows(g.rows() - split);
  });
}

Var weighted_sum(Tape& t, std::span<const Var> terms, std::span<const double> weights) {
  double total = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) total += weights[i] * t.value(terms[i])(0, 0);
  Mat out(1, 1);
  out(0, 0) = total;
  auto ts = std::make_shared<std::vector<Var>>(terms.begin(), terms.end());
  auto ws = std::make_shared<std::vector<double>>(weights.begin(), weights.end());
  return t.push(std::move(out), terms, [ts, ws](Tape& tp, const Mat& g) {
    for (std::size_t i = 0; i < ts->size(); ++i) {
      if (tp.requires_grad((*ts)[i])) tp.grad_ref((*ts)[i])(0, 0) += (*ws)[i] * g(0, 0);
    }
  });
}

}  // namespace icsrec::ad
