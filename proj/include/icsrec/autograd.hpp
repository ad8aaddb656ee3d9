#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// Nodes are appended in evaluation order, so reverse insertion order is a valid
// topological order for the backward sweep. A Tape is single-use: build one per
// forward pass, call backward() once, read gradients, discard.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "icsrec/common.hpp"

namespace icsrec::ad {

struct Var {
  std::size_t id = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat& out_grad)>;

  /// Value that never receives a gradient.
  Var constant(Mat value);
  /// Owned leaf that accumulates a gradient.
  Var leaf(Mat value);
  /// Leaf aliasing external storage; `ref` must outlive the tape.
  Var leaf_ref(const Mat& ref);

  const Mat& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient of the last backward() target with respect to v; zeros if v
  /// did not influence it.
  Mat grad(Var v) const;

  /// Seeds d(out)/d(out) = 1 for a 1 x 1 node and sweeps backwards.
  void backward(Var out);

  /// Records an op result. `parents` decide whether the node needs a gradient;
  /// `fn` is only stored and called when it does.
  Var push(Mat value, std::span<const Var> parents, Backward fn);
  Var push(Mat value, std::initializer_list<Var> parents, Backward fn) {
    return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
  }

  /// Accumulation target for an op's backward; allocated lazily as zeros.
  Mat& grad_ref(Var v);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat owned;
    const Mat* ref = nullptr;
    Mat grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
/// a + broadcast of a 1 x cols row to every row.
Var add_bias(Tape& t, Var a, Var bias);
Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps);
Var gelu(Tape& t, Var x);
/// Inverted dropout; identity when rate == 0.
Var dropout(Tape& t, Var x, double rate, Rng& rng);
/// out.row(r) = table.row(ids[r]). Rows with id == 0 contribute no gradient.
Var gather_rows(Tape& t, Var table, std::span<const ItemId> ids);
/// x is (batch * n) x d; pos (n x d) is added to every n-row block.
Var add_positions(Tape& t, Var x, Var pos, std::size_t batch);
/// out.row(i) = x.row(rows[i]).
Var take_rows(Tape& t, Var x, std::vector<std::size_t> rows);

/// Multi-head scaled dot-product attention over (batch * n) x d projections.
/// Query i of a sequence attends to keys j <= i with valid[j]; queries with no
/// admissible key produce zeros.
Var causal_attention(Tape& t, Var q, Var k, Var v, std::span<const std::uint8_t> valid,
                     std::size_t batch, std::size_t n, std::size_t heads);

/// Gated recurrence over precomputed input gates gx = x Wx + bx, laid out as
/// [reset | update | candidate]. Invalid steps carry the state through
/// unchanged; the initial state is zero.
Var gru_recurrence(Tape& t, Var gx, Var wh, Var bh, std::span<const std::uint8_t> valid,
                   std::size_t batch, std::size_t n);

/// Stacks a on top of b.
Var vstack(Tape& t, Var a, Var b);

/// sum_i weights[i] * terms[i] over 1 x 1 nodes.
Var weighted_sum(Tape& t, std::span<const Var> terms, std::span<const double> weights);

}  // namespace icsrec::ad
