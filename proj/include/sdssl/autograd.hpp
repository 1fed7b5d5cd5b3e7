#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every value is a 2-D matrix; scalars are 1x1. A Var is a cheap handle onto a
// shared graph node. Ops record a backward closure only when gradient
// recording is enabled and at least one input requires a gradient, so
// forwards under NoGradGuard (teacher passes, evaluation) keep no graph.

#include "sdssl/common.hpp"

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace sdssl::ag {

struct Node {
  Matrix value;
  Matrix grad;  // empty until the first contribution arrives
  bool requires_grad = false;
  /// Set once backward has consumed this interior node.
  bool released = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Matrix& g);
  template <typename Expr>
  void accumulate_expr(const Expr& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad.noalias() += g;
    }
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }
  [[nodiscard]] const Matrix& value() const { return node_->value; }
  /// Direct write access; only for optimizers and parameter surgery.
  [[nodiscard]] Matrix& mutable_value() { return node_->value; }
  [[nodiscard]] const Matrix& grad() const { return node_->grad; }
  [[nodiscard]] Matrix& mutable_grad() { return node_->grad; }
  [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
  [[nodiscard]] Index rows() const { return node_->value.rows(); }
  [[nodiscard]] Index cols() const { return node_->value.cols(); }
  [[nodiscard]] Real item() const;

  /// Leaf copy with no gradient history (stop-gradient).
  [[nodiscard]] Var detach() const;
  void zero_grad() const { node_->grad.resize(0, 0); }
  /// Squared Frobenius norm of the accumulated gradient (0 when none).
  [[nodiscard]] Real grad_squared_norm() const;

  [[nodiscard]] const std::shared_ptr<Node>& node() const { return node_; }

 private:
  friend Var make_result(Matrix value, std::initializer_list<Var> inputs,
                         std::function<void(Node&)> backward_fn);
  friend Var make_result(Matrix value, const std::vector<Var>& inputs,
                         std::function<void(Node&)> backward_fn);
  std::shared_ptr<Node> node_;
};

/// Trainable leaf.
Var parameter(Matrix init);
/// Constant leaf.
Var constant(Matrix value);
Var scalar(Real value);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Seeds d(root)/d(root) = 1 and propagates to every reachable input. The
/// graph is consumed on the way: interior gradients and edges are freed, and
/// a second backward through the same interior nodes throws.
void backward(const Var& root);

/// Builds an op result, recording `backward_fn` only when needed.
Var make_result(Matrix value, std::initializer_list<Var> inputs,
                std::function<void(Node&)> backward_fn);
Var make_result(Matrix value, const std::vector<Var>& inputs,
                std::function<void(Node&)> backward_fn);

// ---- elementwise and shape ops ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, Real s);
/// s * a + offset, elementwise.
Var affine(const Var& a, Real s, Real offset);
Var relu(const Var& x);
/// Exact (erf) GELU.
Var gelu(const Var& x);
Var sum(const Var& x);
Var mean(const Var& x);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& x, Index start, Index count);
/// Row i of the result is row indices[i] of x; backward scatter-adds.
Var gather_rows(const Var& x, std::span<const Index> indices);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);
/// a * b^T
Var matmul_nt(const Var& a, const Var& b);
/// x * w + bias (bias may be undefined).
Var linear(const Var& x, const Var& w, const Var& bias);

// ---- normalization ----
/// Per-row layer normalization with affine gamma/beta (1 x D).
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Real eps);

struct BatchStats {
  RowVector mean;
  RowVector var;  // biased
};
/// Per-column normalization over the rows of x using batch statistics.
/// gamma/beta may be undefined for the non-affine variant.
Var batch_norm_batch_stats(const Var& x, const Var& gamma, const Var& beta, Real eps,
                           BatchStats* stats_out);
/// Normalization with fixed statistics (evaluation mode).
Var batch_norm_fixed_stats(const Var& x, const Var& gamma, const Var& beta,
                           const RowVector& mean, const RowVector& var, Real eps);
/// Each row divided by its Euclidean norm (floored at eps).
Var normalize_rows(const Var& x, Real eps = 1e-12);

// ---- losses ----
/// Mean over rows of the row-wise inner product <a_i, b_i>.
Var mean_rowwise_dot(const Var& a, const Var& b);
/// Mean over rows of -log softmax(logits_i)[labels_i]; columns listed in
/// `excluded` (one per row, -1 for none) are removed from the softmax.
Var softmax_cross_entropy(const Var& logits, std::span<const int> labels,
                          std::span<const int> excluded = {});

// ---- transformer-specific ----
/// Multi-head self-attention core. qkv is (batch*tokens) x 3D laid out as
/// [Q | K | V]; returns (batch*tokens) x D with heads concatenated.
Var multi_head_attention(const Var& qkv, Index batch, Index tokens, Index heads);
/// Builds the (batch*(1+patches)) x D token matrix: row 0 of each sample is
/// cls + pos[0], rows 1.. are patch rows + pos[1..].
Var assemble_tokens(const Var& patch_rows, const Var& cls, const Var& pos, Index batch,
                    Index patches);

}  // namespace sdssl::ag
