#include "sdssl/autograd.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

namespace sdssl::ag {

namespace {

thread_local bool g_grad_enabled = true;

bool any_requires_grad(std::span<const Var> inputs) {
  for (const auto& v : inputs) {
    if (v.requires_grad()) return true;
  }
  return false;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                      std::to_string(b.cols()));
  }
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Real Var::item() const {
  if (rows() != 1 || cols() != 1) throw ConfigError("item() on a non-scalar value");
  return node_->value(0, 0);
}

Var Var::detach() const { return Var(node_->value, false); }

Real Var::grad_squared_norm() const {
  return node_->grad.size() == 0 ? 0.0 : node_->grad.squaredNorm();
}

Var parameter(Matrix init) { return Var(std::move(init), true); }
Var constant(Matrix value) { return Var(std::move(value), false); }
Var scalar(Real value) {
  Matrix m(1, 1);
  m(0, 0) = value;
  return Var(std::move(m), false);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Matrix value, const std::vector<Var>& inputs,
                std::function<void(Node&)> backward_fn) {
  Var out(std::move(value), false);
  if (g_grad_enabled && any_requires_grad(inputs)) {
    out.node_->requires_grad = true;
    out.node_->inputs.reserve(inputs.size());
    for (const auto& v : inputs) out.node_->inputs.push_back(v.node());
    out.node_->backward_fn = std::move(backward_fn);
  }
  return out;
}

Var make_result(Matrix value, std::initializer_list<Var> inputs,
                std::function<void(Node&)> backward_fn) {
  return make_result(std::move(value), std::vector<Var>(inputs), std::move(backward_fn));
}

void backward(const Var& root) {
  if (!root.requires_grad()) return;
  if (root.node()->released) throw Error("backward: graph was already consumed by an earlier backward");
  // Iterative post-order DFS gives a topological order. Holding owning
  // pointers lets each interior node be freed as soon as it is processed.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const std::shared_ptr<Node>& child = node->inputs[next++];
      if (child->requires_grad && !visited.contains(child.get())) {
        if (child->released) throw Error("backward: graph was already consumed by an earlier backward");
        visited.insert(child.get());
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }
  Node& r = *root.node();
  r.accumulate(Matrix::Ones(r.value.rows(), r.value.cols()));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = it->get();
    if (n->backward_fn) {
      if (n->grad.size() != 0) n->backward_fn(*n);
      // interior nodes: drop the gradient, the closure and the input edges
      n->backward_fn = nullptr;
      n->inputs.clear();
      n->inputs.shrink_to_fit();
      n->grad.resize(0, 0);
      n->released = true;
    }
    it->reset();
  }
}

// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make_result(a.value() + b.value(), {a, b}, [a, b](Node& self) {
    if (a.requires_grad()) a.node()->accumulate(self.grad);
    if (b.requires_grad()) b.node()->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make_result(a.value() - b.value(), {a, b}, [a, b](Node& self) {
    if (a.requires_grad()) a.node()->accumulate(self.grad);
    if (b.requires_grad()) b.node()->accumulate_expr(-self.grad);
  });
}

Var scale(const Var& a, Real s) {
  return make_result(a.value() * s, {a}, [a, s](Node& self) {
    a.node()->accumulate_expr(self.grad * s);
  });
}

Var affine(const Var& a, Real s, Real offset) {
  Matrix v = (a.value().array() * s + offset).matrix();
  return make_result(std::move(v), {a}, [a, s](Node& self) {
    a.node()->accumulate_expr(self.grad * s);
  });
}

Var relu(const Var& x) {
  Matrix v = x.value().cwiseMax(0.0);
  return make_result(std::move(v), {x}, [x](Node& self) {
    x.node()->accumulate_expr(
        (x.value().array() > 0.0).select(self.grad.array(), 0.0).matrix());
  });
}

Var gelu(const Var& x) {
  constexpr Real inv_sqrt2 = 0.70710678118654752440;
  Matrix v = x.value().unaryExpr(
      [](Real t) { return 0.5 * t * (1.0 + std::erf(t * inv_sqrt2)); });
  return make_result(std::move(v), {x}, [x](Node& self) {
    constexpr Real inv_sqrt_2pi = 0.39894228040143267794;
    Matrix d = x.value().unaryExpr([](Real t) {
      return 0.5 * (1.0 + std::erf(t * inv_sqrt2)) + t * inv_sqrt_2pi * std::exp(-0.5 * t * t);
    });
    x.node()->accumulate_expr(self.grad.cwiseProduct(d));
  });
}

Var sum(const Var& x) {
  Matrix v(1, 1);
  v(0, 0) = x.value().sum();
  return make_result(std::move(v), {x}, [x](Node& self) {
    x.node()->accumulate_expr(Matrix::Constant(x.rows(), x.cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& x) {
  const auto n = static_cast<Real>(x.value().size());
  Matrix v(1, 1);
  v(0, 0) = x.value().sum() / n;
  return make_result(std::move(v), {x}, [x, n](Node& self) {
    x.node()->accumulate_expr(Matrix::Constant(x.rows(), x.cols(), self.grad(0, 0) / n));
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ConfigError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix v(rows, cols);
  Index r = 0;
  for (const auto& p : parts) {
    v.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return make_result(std::move(v), parts, [parts](Node& self) {
    Index offset = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) p.node()->accumulate_expr(self.grad.middleRows(offset, p.rows()));
      offset += p.rows();
    }
  });
}

Var slice_rows(const Var& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.rows()) {
    throw IndexError("slice_rows: range out of bounds");
  }
  Matrix v = x.value().middleRows(start, count);
  return make_result(std::move(v), {x}, [x, start, count](Node& self) {
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    g.middleRows(start, count) = self.grad;
    x.node()->accumulate(g);
  });
}

Var gather_rows(const Var& x, std::span<const Index> indices) {
  Matrix v(static_cast<Index>(indices.size()), x.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= x.rows()) throw IndexError("gather_rows: index out of bounds");
    v.row(static_cast<Index>(i)) = x.value().row(indices[i]);
  }
  std::vector<Index> idx(indices.begin(), indices.end());
  return make_result(std::move(v), {x}, [x, idx = std::move(idx)](Node& self) {
    Matrix g = Matrix::Zero(x.rows(), x.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Index>(i));
    x.node()->accumulate(g);
  });
}

// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ConfigError("matmul: inner dimension mismatch");
  Matrix v;
  v.noalias() = a.value() * b.value();
  return make_result(std::move(v), {a, b}, [a, b](Node& self) {
    if (a.requires_grad()) a.node()->accumulate_expr(self.grad * b.value().transpose());
    if (b.requires_grad()) b.node()->accumulate_expr(a.value().transpose() * self.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ConfigError("matmul_nt: inner dimension mismatch");
  Matrix v;
  v.noalias() = a.value() * b.value().transpose();
  return make_result(std::move(v), {a, b}, [a, b](Node& self) {
    if (a.requires_grad()) a.node()->accumulate_expr(self.grad * b.value());
    if (b.requires_grad()) b.node()->accumulate_expr(self.grad.transpose() * a.value());
  });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
  if (x.cols() != w.rows()) {
    throw ConfigError("linear: input width " + std::to_string(x.cols()) +
                      " does not match weight rows " + std::to_string(w.rows()));
  }
  Matrix v;
  v.noalias() = x.value() * w.value();
  if (bias.defined()) v.rowwise() += bias.value().row(0);
  std::vector<Var> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(std::move(v), inputs, [x, w, bias](Node& self) {
    if (x.requires_grad()) x.node()->accumulate_expr(self.grad * w.value().transpose());
    if (w.requires_grad()) w.node()->accumulate_expr(x.value().transpose() * self.grad);
    if (bias.defined() && bias.requires_grad()) {
      bias.node()->accumulate_expr(self.grad.colwise().sum());
    }
  });
}

// ---------------------------------------------------------------------------

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Real eps) {
  const Index rows = x.rows();
  const Index d = x.cols();
  Matrix xhat(rows, d);
  ColVector inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const auto row = x.value().row(r);
    const Real mu = row.mean();
    const Real var = (row.array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (row.array() - mu) * inv_std(r);
  }
  Matrix v = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  v.rowwise() += beta.value().row(0);
  return make_result(std::move(v), {x, gamma, beta},
                     [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    const Matrix& g = self.grad;
    if (gamma.requires_grad()) gamma.node()->accumulate_expr(g.cwiseProduct(xhat).colwise().sum());
    if (beta.requires_grad()) beta.node()->accumulate_expr(g.colwise().sum());
    if (x.requires_grad()) {
      const Matrix gx_hat = (g.array().rowwise() * gamma.value().row(0).array()).matrix();
      const auto dn = static_cast<Real>(xhat.cols());
      Matrix gx(xhat.rows(), xhat.cols());
      for (Index r = 0; r < xhat.rows(); ++r) {
        const Real s1 = gx_hat.row(r).sum();
        const Real s2 = gx_hat.row(r).dot(xhat.row(r));
        gx.row(r) = (inv_std(r) / dn) *
                    (dn * gx_hat.row(r).array() - s1 - xhat.row(r).array() * s2).matrix();
      }
      x.node()->accumulate(gx);
    }
  });
}

Var batch_norm_batch_stats(const Var& x, const Var& gamma, const Var& beta, Real eps,
                           BatchStats* stats_out) {
  const Index n = x.rows();
  if (n < 2) throw ConfigError("batch_norm: batch statistics need at least 2 rows");
  const RowVector mu = x.value().colwise().mean();
  const Matrix centered = x.value().rowwise() - mu;
  const RowVector var = centered.array().square().colwise().mean();
  const RowVector inv_std = (var.array() + eps).rsqrt();
  Matrix xhat = (centered.array().rowwise() * inv_std.array()).matrix();
  if (stats_out) {
    stats_out->mean = mu;
    stats_out->var = var;
  }
  Matrix v = xhat;
  if (gamma.defined()) v = (v.array().rowwise() * gamma.value().row(0).array()).matrix();
  if (beta.defined()) v.rowwise() += beta.value().row(0);
  std::vector<Var> inputs{x};
  if (gamma.defined()) inputs.push_back(gamma);
  if (beta.defined()) inputs.push_back(beta);
  return make_result(std::move(v), inputs,
                     [x, gamma, beta, xhat = std::move(xhat), inv_std](Node& self) {
    const Matrix& g = self.grad;
    if (gamma.defined() && gamma.requires_grad()) {
      gamma.node()->accumulate_expr(g.cwiseProduct(xhat).colwise().sum());
    }
    if (beta.defined() && beta.requires_grad()) beta.node()->accumulate_expr(g.colwise().sum());
    if (x.requires_grad()) {
      Matrix gx_hat = g;
      if (gamma.defined()) gx_hat = (g.array().rowwise() * gamma.value().row(0).array()).matrix();
      const auto nn = static_cast<Real>(xhat.rows());
      const RowVector s1 = gx_hat.colwise().sum();
      const RowVector s2 = gx_hat.cwiseProduct(xhat).colwise().sum();
      Matrix gx = ((nn * gx_hat.array()).rowwise() - s1.array() -
                   xhat.array().rowwise() * s2.array())
                      .matrix();
      gx = (gx.array().rowwise() * (inv_std.array() / nn)).matrix();
      x.node()->accumulate(gx);
    }
  });
}

Var batch_norm_fixed_stats(const Var& x, const Var& gamma, const Var& beta,
                           const RowVector& mean, const RowVector& var, Real eps) {
  const RowVector inv_std = (var.array() + eps).rsqrt();
  Matrix xhat = ((x.value().rowwise() - mean).array().rowwise() * inv_std.array()).matrix();
  Matrix v = xhat;
  if (gamma.defined()) v = (v.array().rowwise() * gamma.value().row(0).array()).matrix();
  if (beta.defined()) v.rowwise() += beta.value().row(0);
  std::vector<Var> inputs{x};
  if (gamma.defined()) inputs.push_back(gamma);
  if (beta.defined()) inputs.push_back(beta);
  return make_result(std::move(v), inputs,
                     [x, gamma, beta, xhat = std::move(xhat), inv_std](Node& self) {
    const Matrix& g = self.grad;
    if (gamma.defined() && gamma.requires_grad()) {
      gamma.node()->accumulate_expr(g.cwiseProduct(xhat).colwise().sum());
    }
    if (beta.defined() && beta.requires_grad()) beta.node()->accumulate_expr(g.colwise().sum());
    if (x.requires_grad()) {
      RowVector factor = inv_std;
      if (gamma.defined()) factor = factor.cwiseProduct(gamma.value().row(0));
      x.node()->accumulate_expr((g.array().rowwise() * factor.array()).matrix());
    }
  });
}

Var normalize_rows(const Var& x, Real eps) {
  const ColVector norms = x.value().rowwise().norm().cwiseMax(eps);
  Matrix y = x.value().array().colwise() / norms.array();
  return make_result(y, {x}, [x, y, norms](Node& self) {
    const ColVector dots = self.grad.cwiseProduct(y).rowwise().sum();
    Matrix gx = (self.grad - (y.array().colwise() * dots.array()).matrix());
    gx = gx.array().colwise() / norms.array();
    x.node()->accumulate(gx);
  });
}

// ---------------------------------------------------------------------------

Var mean_rowwise_dot(const Var& a, const Var& b) {
  check_same_shape(a, b, "mean_rowwise_dot");
  const auto n = static_cast<Real>(a.rows());
  Matrix v(1, 1);
  v(0, 0) = a.value().cwiseProduct(b.value()).sum() / n;
  return make_result(std::move(v), {a, b}, [a, b, n](Node& self) {
    const Real g = self.grad(0, 0) / n;
    if (a.requires_grad()) a.node()->accumulate_expr(b.value() * g);
    if (b.requires_grad()) b.node()->accumulate_expr(a.value() * g);
  });
}

Var softmax_cross_entropy(const Var& logits, std::span<const int> labels,
                          std::span<const int> excluded) {
  const Index rows = logits.rows();
  const Index cols = logits.cols();
  if (static_cast<Index>(labels.size()) != rows) {
    throw ConfigError("softmax_cross_entropy: one label per row required");
  }
  if (!excluded.empty() && static_cast<Index>(excluded.size()) != rows) {
    throw ConfigError("softmax_cross_entropy: exclusion list must have one entry per row");
  }
  Matrix probs(rows, cols);
  Real total = 0.0;
  for (Index r = 0; r < rows; ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    const int skip = excluded.empty() ? -1 : excluded[static_cast<std::size_t>(r)];
    if (label < 0 || label >= cols) throw IndexError("softmax_cross_entropy: label out of range");
    if (label == skip) throw ConfigError("softmax_cross_entropy: label column is excluded");
    Real mx = -std::numeric_limits<Real>::infinity();
    for (Index c = 0; c < cols; ++c) {
      if (c != skip) mx = std::max(mx, logits.value()(r, c));
    }
    Real z = 0.0;
    for (Index c = 0; c < cols; ++c) {
      const Real e = (c == skip) ? 0.0 : std::exp(logits.value()(r, c) - mx);
      probs(r, c) = e;
      z += e;
    }
    probs.row(r) /= z;
    total += -(logits.value()(r, label) - mx - std::log(z));
  }
  Matrix v(1, 1);
  v(0, 0) = total / static_cast<Real>(rows);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result(std::move(v), {logits},
                     [logits, probs = std::move(probs), lab = std::move(lab)](Node& self) {
    Matrix g = probs;
    for (std::size_t r = 0; r < lab.size(); ++r) g(static_cast<Index>(r), lab[r]) -= 1.0;
    g *= self.grad(0, 0) / static_cast<Real>(lab.size());
    logits.node()->accumulate(g);
  });
}

// ---------------------------------------------------------------------------

Var multi_head_attention(const Var& qkv, Index batch, Index tokens, Index heads) {
  const Index width = qkv.cols() / 3;
  if (qkv.cols() != 3 * width || width % heads != 0 || qkv.rows() != batch * tokens) {
    throw ConfigError("multi_head_attention: qkv shape inconsistent with batch/tokens/heads");
  }
  const Index dh = width / heads;
  const Real scale_factor = 1.0 / std::sqrt(static_cast<Real>(dh));
  const Matrix& in = qkv.value();
  Matrix out(batch * tokens, width);
  // probabilities for every (sample, head), stacked row-wise
  Matrix probs(batch * heads * tokens, tokens);
  Matrix scores(tokens, tokens);
  for (Index n = 0; n < batch; ++n) {
    for (Index h = 0; h < heads; ++h) {
      const auto q = in.block(n * tokens, h * dh, tokens, dh);
      const auto k = in.block(n * tokens, width + h * dh, tokens, dh);
      const auto v = in.block(n * tokens, 2 * width + h * dh, tokens, dh);
      scores.noalias() = (q * k.transpose()) * scale_factor;
      for (Index r = 0; r < tokens; ++r) {
        const Real mx = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - mx).exp();
        scores.row(r) /= scores.row(r).sum();
      }
      probs.middleRows((n * heads + h) * tokens, tokens) = scores;
      out.block(n * tokens, h * dh, tokens, dh).noalias() = scores * v;
    }
  }
  return make_result(std::move(out), {qkv},
                     [qkv, batch, tokens, heads, dh, width, scale_factor,
                      probs = std::move(probs)](Node& self) {
    const Matrix& in = qkv.value();
    const Matrix& g = self.grad;
    Matrix gqkv(in.rows(), in.cols());
    Matrix gp(tokens, tokens);
    for (Index n = 0; n < batch; ++n) {
      for (Index h = 0; h < heads; ++h) {
        const auto p = probs.middleRows((n * heads + h) * tokens, tokens);
        const auto q = in.block(n * tokens, h * dh, tokens, dh);
        const auto k = in.block(n * tokens, width + h * dh, tokens, dh);
        const auto v = in.block(n * tokens, 2 * width + h * dh, tokens, dh);
        const auto go = g.block(n * tokens, h * dh, tokens, dh);
        gp.noalias() = go * v.transpose();
        gqkv.block(n * tokens, 2 * width + h * dh, tokens, dh).noalias() = p.transpose() * go;
        // softmax backward: gs = p * (gp - rowsum(gp * p))
        const ColVector rs = gp.cwiseProduct(p).rowwise().sum();
        gp = (p.array() * (gp.colwise() - rs).array()).matrix() * scale_factor;
        gqkv.block(n * tokens, h * dh, tokens, dh).noalias() = gp * k;
        gqkv.block(n * tokens, width + h * dh, tokens, dh).noalias() = gp.transpose() * q;
      }
    }
    qkv.node()->accumulate(gqkv);
  });
}

Var assemble_tokens(const Var& patch_rows, const Var& cls, const Var& pos, Index batch,
                    Index patches) {
  const Index d = cls.cols();
  const Index tokens = patches + 1;
  if (patch_rows.rows() != batch * patches || patch_rows.cols() != d || pos.rows() != tokens ||
      pos.cols() != d || cls.rows() != 1) {
    throw ConfigError("assemble_tokens: shape mismatch");
  }
  Matrix v(batch * tokens, d);
  for (Index n = 0; n < batch; ++n) {
    v.row(n * tokens) = cls.value().row(0) + pos.value().row(0);
    v.middleRows(n * tokens + 1, patches) =
        patch_rows.value().middleRows(n * patches, patches) + pos.value().bottomRows(patches);
  }
  return make_result(std::move(v), {patch_rows, cls, pos},
                     [patch_rows, cls, pos, batch, patches, tokens](Node& self) {
    const Matrix& g = self.grad;
    if (cls.requires_grad()) {
      RowVector gc = RowVector::Zero(cls.cols());
      for (Index n = 0; n < batch; ++n) gc += g.row(n * tokens);
      cls.node()->accumulate(gc);
    }
    if (patch_rows.requires_grad()) {
      Matrix gpch(batch * patches, g.cols());
      for (Index n = 0; n < batch; ++n) {
        gpch.middleRows(n * patches, patches) = g.middleRows(n * tokens + 1, patches);
      }
      patch_rows.node()->accumulate(gpch);
    }
    if (pos.requires_grad()) {
      Matrix gpos = Matrix::Zero(tokens, g.cols());
      for (Index n = 0; n < batch; ++n) gpos += g.middleRows(n * tokens, tokens);
      pos.node()->accumulate(gpos);
    }
  });
}

}  // namespace sdssl::ag
