#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "pser/autodiff.hpp"
#include "pser/rng.hpp"

#include "helpers.hpp"

using namespace pser;

namespace {

// Central finite differences on every element of every leaf against the
// gradients produced by backward(). Returns the worst relative error.
double fd_max_rel(const std::vector<ad::NodePtr>& leaves,
                  const std::function<ad::NodePtr()>& build, double h = 1e-6) {
  auto loss = build();
  ad::backward(loss);
  std::vector<Matrix> grads;
  grads.reserve(leaves.size());
  for (const auto& l : leaves) grads.push_back(l->grad);

  double worst = 0.0;
  for (size_t k = 0; k < leaves.size(); ++k) {
    Matrix& v = leaves[k]->value;
    for (int i = 0; i < v.rows(); ++i) {
      for (int j = 0; j < v.cols(); ++j) {
        double orig = v(i, j);
        v(i, j) = orig + h;
        double up = build()->value(0, 0);
        v(i, j) = orig - h;
        double dn = build()->value(0, 0);
        v(i, j) = orig;
        double fd = (up - dn) / (2.0 * h);
        double g = grads[k](i, j);
        double rel = std::abs(fd - g) / std::max({1.0, std::abs(fd), std::abs(g)});
        worst = std::max(worst, rel);
      }
    }
  }
  return worst;
}

ad::NodePtr rand_leaf(RngStream& rng, int r, int c, double scale = 1.0) {
  return ad::leaf(pser::test::random_matrix(rng, r, c, scale));
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  RngStream rng(101);
  auto a = rand_leaf(rng, 3, 4);
  auto b = rand_leaf(rng, 3, 4);
  // keep |b| away from zero so div stays smooth
  b->value = b->value.unaryExpr([](double x) { return x + (x >= 0 ? 1.0 : -1.0); });

  CHECK(fd_max_rel({a, b}, [&] { return ad::sum_all(ad::add(a, b)); }) < 1e-7);
  CHECK(fd_max_rel({a, b}, [&] { return ad::sum_all(ad::sub(a, b)); }) < 1e-7);
  CHECK(fd_max_rel({a, b}, [&] { return ad::sum_all(ad::mul(a, b)); }) < 1e-7);
  CHECK(fd_max_rel({a, b}, [&] { return ad::sum_all(ad::div(a, b)); }) < 1e-7);
  CHECK(fd_max_rel({a}, [&] { return ad::sum_all(ad::scale(a, -2.5)); }) < 1e-7);
  CHECK(fd_max_rel({a}, [&] { return ad::sum_all(ad::gelu(a)); }) < 1e-6);
  CHECK(fd_max_rel({a}, [&] { return ad::mean_all(ad::mul(a, a)); }) < 1e-7);
}

TEST_CASE("relu gradient away from the kink") {
  RngStream rng(102);
  auto a = rand_leaf(rng, 4, 4);
  // push every entry at least 0.1 from zero
  a->value = a->value.unaryExpr([](double x) { return x + (x >= 0 ? 0.1 : -0.1); });
  CHECK(fd_max_rel({a}, [&] { return ad::sum_all(ad::relu(a)); }) < 1e-7);
}

TEST_CASE("matrix products match finite differences") {
  RngStream rng(103);
  auto a = rand_leaf(rng, 3, 5);
  auto b = rand_leaf(rng, 5, 2);
  auto c = rand_leaf(rng, 4, 5);
  CHECK(fd_max_rel({a, b}, [&] { return ad::sum_all(ad::matmul(a, b)); }) < 1e-7);
  CHECK(fd_max_rel({a, c}, [&] { return ad::sum_all(ad::matmul_nt(a, c)); }) < 1e-7);
  // weight the output so gradients are not all ones
  auto w = rand_leaf(rng, 3, 2);
  CHECK(fd_max_rel({a, b, w}, [&] { return ad::sum_all(ad::mul(ad::matmul(a, b), w)); }) < 1e-7);
}

TEST_CASE("broadcast ops match finite differences") {
  RngStream rng(104);
  auto x = rand_leaf(rng, 4, 3);
  auto row = rand_leaf(rng, 1, 3);
  auto s = rand_leaf(rng, 1, 1);
  auto w = rand_leaf(rng, 4, 3);
  CHECK(fd_max_rel({x, row, w}, [&] {
          return ad::sum_all(ad::mul(ad::add_row_broadcast(x, row), w));
        }) < 1e-7);
  CHECK(fd_max_rel({x, row, w}, [&] {
          return ad::sum_all(ad::mul(ad::mul_row_broadcast(x, row), w));
        }) < 1e-7);
  CHECK(fd_max_rel({x, s, w}, [&] { return ad::sum_all(ad::mul(ad::sub_bcast(x, s), w)); }) <
        1e-7);
}

TEST_CASE("reductions match finite differences") {
  RngStream rng(105);
  auto x = rand_leaf(rng, 5, 3);
  auto w = rand_leaf(rng, 1, 3);
  CHECK(fd_max_rel({x}, [&] { return ad::sum_all(ad::mul(x, x)); }) < 1e-7);
  CHECK(fd_max_rel({x}, [&] { return ad::mean_all(ad::mul(x, x)); }) < 1e-7);
  CHECK(fd_max_rel({x, w}, [&] { return ad::sum_all(ad::mul(ad::mean_rows(x), w)); }) < 1e-7);
}

TEST_CASE("structure ops route gradients to the right places") {
  RngStream rng(106);
  auto x = rand_leaf(rng, 6, 4);
  auto y = rand_leaf(rng, 2, 4);
  auto z = rand_leaf(rng, 6, 2);
  auto v = rand_leaf(rng, 1, 4);

  CHECK(fd_max_rel({x}, [&] {
          auto s = ad::slice_rows(x, 1, 3);
          return ad::sum_all(ad::mul(s, s));
        }) < 1e-7);
  CHECK(fd_max_rel({x}, [&] {
          auto s = ad::slice_cols(x, 2, 2);
          return ad::sum_all(ad::mul(s, s));
        }) < 1e-7);
  CHECK(fd_max_rel({x, y}, [&] {
          auto c = ad::concat_rows({x, y});
          return ad::sum_all(ad::mul(c, c));
        }) < 1e-7);
  CHECK(fd_max_rel({x, z}, [&] {
          auto c = ad::concat_cols({x, z});
          return ad::sum_all(ad::mul(c, c));
        }) < 1e-7);
  CHECK(fd_max_rel({x, v}, [&] {
          auto r = ad::replace_rows(x, {0, 3, 5}, v);
          return ad::sum_all(ad::mul(r, r));
        }) < 1e-7);
}

TEST_CASE("replace_rows zeroes gradient flow through replaced rows") {
  RngStream rng(107);
  auto x = rand_leaf(rng, 4, 2);
  auto v = ad::leaf(Matrix::Zero(1, 2));
  auto loss = ad::sum_all(ad::mul(ad::replace_rows(x, {1, 2}, v), ad::replace_rows(x, {1, 2}, v)));
  ad::backward(loss);
  CHECK(x->grad.row(1).cwiseAbs().maxCoeff() == 0.0);
  CHECK(x->grad.row(2).cwiseAbs().maxCoeff() == 0.0);
  CHECK(x->grad.row(0).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("softmax, layer norm and batch norm match finite differences") {
  RngStream rng(108);
  auto x = rand_leaf(rng, 4, 5);
  auto w = rand_leaf(rng, 4, 5);
  auto gamma = rand_leaf(rng, 1, 5);
  auto beta = rand_leaf(rng, 1, 5);
  gamma->value.array() += 2.0;  // keep scale away from zero

  CHECK(fd_max_rel({x, w}, [&] { return ad::sum_all(ad::mul(ad::softmax_rows(x), w)); }, 1e-5) <
        1e-6);
  CHECK(fd_max_rel({x, gamma, beta, w},
                   [&] { return ad::sum_all(ad::mul(ad::layer_norm(x, gamma, beta), w)); },
                   1e-5) < 1e-5);
  CHECK(fd_max_rel({x, gamma, beta, w},
                   [&] {
                     auto bn = ad::batch_norm_train(x, gamma, beta);
                     return ad::sum_all(ad::mul(bn.y, w));
                   },
                   1e-5) < 1e-5);
}

TEST_CASE("batch norm exposes the batch statistics it normalized with") {
  RngStream rng(109);
  auto x = rand_leaf(rng, 8, 3);
  auto gamma = ad::leaf(Matrix::Ones(1, 3));
  auto beta = ad::leaf(Matrix::Zero(1, 3));
  auto bn = ad::batch_norm_train(x, gamma, beta);
  for (int j = 0; j < 3; ++j) {
    double mu = x->value.col(j).mean();
    double var = (x->value.col(j).array() - mu).square().mean();
    CHECK(bn.batch_mean(j) == doctest::Approx(mu).epsilon(1e-12));
    CHECK(bn.batch_var(j) == doctest::Approx(var).epsilon(1e-12));
    // normalized output has zero mean and ~unit variance per column
    CHECK(bn.y->value.col(j).mean() == doctest::Approx(0.0).scale(1.0).epsilon(1e-10));
  }
}

TEST_CASE("im2col unfolds windows and carries gradients") {
  RngStream rng(110);
  auto x = rand_leaf(rng, 10, 2);
  auto out = ad::im2col(x, 3, 2);
  REQUIRE(out->value.rows() == 4);  // floor((10-3)/2)+1
  REQUIRE(out->value.cols() == 6);
  // row 1 is frames 2..4 flattened frame-major
  for (int f = 0; f < 3; ++f)
    for (int c = 0; c < 2; ++c) CHECK(out->value(1, f * 2 + c) == x->value(2 + f, c));

  auto w = rand_leaf(rng, 4, 6);
  CHECK(fd_max_rel({x, w}, [&] { return ad::sum_all(ad::mul(ad::im2col(x, 3, 2), w)); }) < 1e-7);
}

TEST_CASE("cross_entropy_rows matches a direct computation and masks rows") {
  RngStream rng(111);
  auto logits = rand_leaf(rng, 5, 4);
  std::vector<int> labels = {1, 3, 0, 2, 1};
  std::vector<int> rows = {0, 2, 4};

  auto loss = ad::cross_entropy_rows(logits, labels, rows);
  double expect = 0.0;
  for (int r : rows) {
    Eigen::RowVectorXd lr = logits->value.row(r);
    double m = lr.maxCoeff();
    double z = (lr.array() - m).exp().sum();
    expect += -(lr(labels[size_t(r)]) - m - std::log(z));
  }
  CHECK(loss->value(0, 0) == doctest::Approx(expect).epsilon(1e-12));

  ad::backward(loss);
  CHECK(logits->grad.row(1).cwiseAbs().maxCoeff() == 0.0);
  CHECK(logits->grad.row(3).cwiseAbs().maxCoeff() == 0.0);
  CHECK(logits->grad.row(0).cwiseAbs().maxCoeff() > 0.0);

  CHECK(fd_max_rel({logits}, [&] { return ad::cross_entropy_rows(logits, labels, rows); }, 1e-5) <
        1e-6);
}

TEST_CASE("gradients accumulate across shared subexpressions") {
  auto x = ad::leaf(Matrix::Constant(1, 1, 3.0));
  // f = x*x + x  =>  df/dx = 2x + 1 = 7
  auto loss = ad::add(ad::mul(x, x), x);
  ad::backward(loss);
  CHECK(x->grad(0, 0) == doctest::Approx(7.0).epsilon(1e-12));
}

TEST_CASE("diamond graphs sum both paths") {
  auto x = ad::leaf(Matrix::Constant(1, 1, 2.0));
  auto a = ad::scale(x, 3.0);
  auto b = ad::mul(x, x);
  // f = 3x + x^2  =>  df/dx = 3 + 2x = 7
  auto loss = ad::add(a, b);
  ad::backward(loss);
  CHECK(x->grad(0, 0) == doctest::Approx(7.0).epsilon(1e-12));
}

TEST_CASE("backward resets gradients between runs") {
  auto x = ad::leaf(Matrix::Constant(1, 1, 4.0));
  auto build = [&] { return ad::mul(x, x); };
  auto l1 = build();
  ad::backward(l1);
  Matrix first = x->grad;
  auto l2 = build();
  ad::backward(l2);
  CHECK(x->grad == first);  // no doubling
}

TEST_CASE("backward refuses non-scalar roots") {
  auto x = ad::leaf(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(ad::backward(x), ShapeError);
}

TEST_CASE("shape mismatches are rejected") {
  auto a = ad::leaf(Matrix::Ones(2, 3));
  auto b = ad::leaf(Matrix::Ones(3, 2));
  CHECK_THROWS_AS(ad::add(a, b), ShapeError);
  CHECK_THROWS_AS(ad::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(ad::slice_rows(a, 1, 5), ShapeError);
}
