#include "support.hpp"

#include "sdssl/autograd.hpp"

#include <vector>

using namespace sdssl;
using sdssl::testing::check_gradient;
using sdssl::testing::random_matrix;

namespace {

// Reduces a matrix-valued op to a scalar with fixed random weights so every
// output entry contributes a distinct coefficient.
ag::Var weighted_sum(const ag::Var& y, std::uint64_t seed) {
  ag::Var w = ag::constant(random_matrix(y.rows(), y.cols(), seed));
  return ag::mean_rowwise_dot(y, w);
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  ag::Var a = ag::parameter(random_matrix(4, 5, 1));
  ag::Var b = ag::parameter(random_matrix(4, 5, 2));
  auto f = [&] {
    ag::Var y = ag::add(ag::gelu(a), ag::scale(ag::relu(ag::sub(b, a)), 0.7));
    return weighted_sum(ag::affine(y, 1.3, -0.2), 3);
  };
  CHECK(check_gradient(f, a).ok);
  CHECK(check_gradient(f, b).ok);
}

TEST_CASE("matmul, matmul_nt and linear match finite differences") {
  ag::Var x = ag::parameter(random_matrix(3, 4, 4));
  ag::Var w = ag::parameter(random_matrix(4, 6, 5));
  ag::Var bias = ag::parameter(random_matrix(1, 6, 6));
  ag::Var z = ag::parameter(random_matrix(5, 6, 7));
  auto f = [&] {
    ag::Var y = ag::linear(x, w, bias);
    return weighted_sum(ag::matmul_nt(y, z), 8);
  };
  CHECK(check_gradient(f, x).ok);
  CHECK(check_gradient(f, w).ok);
  CHECK(check_gradient(f, bias).ok);
  CHECK(check_gradient(f, z).ok);

  ag::Var c = ag::parameter(random_matrix(6, 2, 9));
  auto g = [&] { return weighted_sum(ag::matmul(ag::linear(x, w, ag::Var{}), c), 10); };
  CHECK(check_gradient(g, c).ok);
  CHECK(check_gradient(g, w).ok);
}

TEST_CASE("row plumbing ops match finite differences") {
  ag::Var a = ag::parameter(random_matrix(4, 3, 11));
  ag::Var b = ag::parameter(random_matrix(2, 3, 12));
  const std::vector<Index> idx{5, 0, 0, 3, 1};
  auto f = [&] {
    ag::Var cat = ag::concat_rows({a, b});
    ag::Var picked = ag::gather_rows(cat, idx);
    ag::Var sl = ag::slice_rows(cat, 1, 3);
    return ag::add(weighted_sum(picked, 13), ag::mean(ag::gelu(sl)));
  };
  CHECK(check_gradient(f, a).ok);
  CHECK(check_gradient(f, b).ok);
}

TEST_CASE("layer norm matches finite differences") {
  ag::Var x = ag::parameter(random_matrix(5, 8, 14));
  ag::Var g = ag::parameter(random_matrix(1, 8, 15));
  ag::Var b = ag::parameter(random_matrix(1, 8, 16));
  auto f = [&] { return weighted_sum(ag::layer_norm(x, g, b, 1e-6), 17); };
  CHECK(check_gradient(f, x).ok);
  CHECK(check_gradient(f, g).ok);
  CHECK(check_gradient(f, b).ok);
}

TEST_CASE("layer norm output has zero mean and unit variance per row") {
  ag::Var x = ag::constant(random_matrix(3, 16, 18, 4.0));
  ag::Var y = ag::layer_norm(x, ag::constant(Matrix::Ones(1, 16)),
                             ag::constant(Matrix::Zero(1, 16)), 1e-6);
  for (Index r = 0; r < 3; ++r) {
    const Real mean = y.value().row(r).mean();
    const Real var = (y.value().row(r).array() - mean).square().mean();
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("batch norm with batch statistics matches finite differences") {
  ag::Var x = ag::parameter(random_matrix(6, 4, 19));
  ag::Var g = ag::parameter(random_matrix(1, 4, 20));
  ag::Var b = ag::parameter(random_matrix(1, 4, 21));
  auto affine_bn = [&] {
    return weighted_sum(ag::batch_norm_batch_stats(x, g, b, 1e-5, nullptr), 22);
  };
  CHECK(check_gradient(affine_bn, x).ok);
  CHECK(check_gradient(affine_bn, g).ok);
  CHECK(check_gradient(affine_bn, b).ok);
  auto plain_bn = [&] {
    return weighted_sum(ag::batch_norm_batch_stats(x, ag::Var{}, ag::Var{}, 1e-5, nullptr), 23);
  };
  CHECK(check_gradient(plain_bn, x).ok);
}

TEST_CASE("batch norm rejects a single-row batch") {
  ag::Var x = ag::constant(random_matrix(1, 4, 24));
  CHECK_THROWS_AS((void)ag::batch_norm_batch_stats(x, ag::Var{}, ag::Var{}, 1e-5, nullptr),
                  ConfigError);
}

TEST_CASE("normalize_rows and row-wise dot match finite differences") {
  ag::Var a = ag::parameter(random_matrix(4, 6, 25));
  ag::Var b = ag::parameter(random_matrix(4, 6, 26));
  auto f = [&] { return ag::mean_rowwise_dot(ag::normalize_rows(a), ag::normalize_rows(b)); };
  CHECK(check_gradient(f, a).ok);
  CHECK(check_gradient(f, b).ok);
}

TEST_CASE("softmax cross-entropy matches finite differences with exclusions") {
  ag::Var logits = ag::parameter(random_matrix(3, 6, 27));
  const std::vector<int> labels{1, 4, 0};
  const std::vector<int> excluded{2, -1, 5};
  auto f = [&] { return ag::softmax_cross_entropy(logits, labels, excluded); };
  CHECK(check_gradient(f, logits).ok);
  // an excluded column has no influence on the loss
  ag::backward(f());
  CHECK(logits.grad()(0, 2) == 0.0);
  CHECK(logits.grad()(2, 5) == 0.0);
}

TEST_CASE("softmax cross-entropy equals a scalar hand computation") {
  Matrix l(1, 3);
  l << 0.5, -1.0, 2.0;
  const std::vector<int> labels{0};
  const Real expected = -std::log(std::exp(0.5) / (std::exp(0.5) + std::exp(-1.0) + std::exp(2.0)));
  CHECK(ag::softmax_cross_entropy(ag::constant(l), labels).item() ==
        doctest::Approx(expected).epsilon(1e-12));
  const std::vector<int> excluded{2};
  const Real expected_ex = -std::log(std::exp(0.5) / (std::exp(0.5) + std::exp(-1.0)));
  CHECK(ag::softmax_cross_entropy(ag::constant(l), labels, excluded).item() ==
        doctest::Approx(expected_ex).epsilon(1e-12));
}

TEST_CASE("multi-head attention matches finite differences") {
  const Index batch = 2, tokens = 3, heads = 2, d = 4;
  ag::Var qkv = ag::parameter(random_matrix(batch * tokens, 3 * d, 28, 0.7));
  auto f = [&] { return weighted_sum(ag::multi_head_attention(qkv, batch, tokens, heads), 29); };
  CHECK(check_gradient(f, qkv, 1e-3, 1e-7, 1e-5, 200).ok);
}

TEST_CASE("attention over one token returns its value vector") {
  const Index d = 4;
  Matrix m = random_matrix(1, 3 * d, 30);
  ag::Var out = ag::multi_head_attention(ag::constant(m), 1, 1, 2);
  for (Index c = 0; c < d; ++c) CHECK(out.value()(0, c) == doctest::Approx(m(0, 2 * d + c)));
}

TEST_CASE("token assembly matches finite differences") {
  const Index batch = 2, patches = 3, d = 4;
  ag::Var p = ag::parameter(random_matrix(batch * patches, d, 31));
  ag::Var cls = ag::parameter(random_matrix(1, d, 32));
  ag::Var pos = ag::parameter(random_matrix(patches + 1, d, 33));
  auto f = [&] { return weighted_sum(ag::assemble_tokens(p, cls, pos, batch, patches), 34); };
  CHECK(check_gradient(f, p).ok);
  CHECK(check_gradient(f, cls).ok);
  CHECK(check_gradient(f, pos).ok);
}

TEST_CASE("no-grad mode records no history and detach cuts the graph") {
  ag::Var a = ag::parameter(random_matrix(2, 2, 35));
  {
    ag::NoGradGuard ng;
    CHECK_FALSE(ag::grad_enabled());
    ag::Var y = ag::sum(ag::gelu(a));
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(ag::grad_enabled());
  ag::Var y = ag::sum(ag::add(a, ag::scale(a.detach(), 5.0)));
  ag::backward(y);
  CHECK((a.grad().array() == 1.0).all());
}

TEST_CASE("gradients accumulate across backward calls until cleared") {
  ag::Var a = ag::parameter(Matrix::Ones(1, 3));
  ag::backward(ag::sum(a));
  ag::backward(ag::sum(a));
  CHECK((a.grad().array() == 2.0).all());
  a.zero_grad();
  CHECK(a.grad_squared_norm() == 0.0);
}

TEST_CASE("backward consumes the interior graph") {
  ag::Var a = ag::parameter(random_matrix(3, 3, 40));
  ag::Var hidden = ag::gelu(ag::matmul(a, a));
  ag::Var loss = ag::sum(hidden);
  ag::backward(loss);
  const Matrix first = a.grad();
  CHECK(first.norm() > 0.0);
  // interior state is gone, leaf gradients and values stay
  CHECK(hidden.grad().size() == 0);
  CHECK(hidden.node()->inputs.empty());
  CHECK(hidden.value().size() == 9);
  CHECK_THROWS_AS(ag::backward(loss), Error);
  CHECK_THROWS_AS(ag::backward(ag::sum(ag::scale(hidden, 2.0))), Error);
  CHECK(a.grad() == first);
}
