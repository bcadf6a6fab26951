#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mats/error.hpp"
#include "mats/grad_tape.hpp"
#include "mats/gradcheck.hpp"
#include "mats/metrics.hpp"
#include "mats/nn_kernels.hpp"
#include "mats/param_store.hpp"
#include "mats/rng.hpp"

using namespace mats;

namespace {

Matrix random_matrix(RngStream& rng, Index r, Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = scale * rng.next_gaussian();
  return m;
}

}  // namespace

TEST_CASE("cross entropy on uniform logits equals ln V exactly") {
  GradTape t;
  const Index V = 64;
  auto logits = t.constant(Matrix::Zero(3, V));
  auto loss = t.cross_entropy_rows(logits, {0, 1, 2}, {5, 0, 63});
  CHECK(t.scalar(loss) == std::log(static_cast<double>(V)));
}

TEST_CASE("cross entropy analytic gradient is softmax minus onehot") {
  ParamStore ps;
  RngStream rng(3);
  ps.add("w", random_matrix(rng, 1, 4));
  GradTape t;
  auto logits = t.param(ps, "w");
  auto loss = t.cross_entropy_rows(logits, {0}, {2});
  t.backward(loss);
  Matrix row = ps.at("w").value;
  softmax_rows_inplace(row);
  row(0, 2) -= 1.0;
  for (Index j = 0; j < 4; ++j)
    CHECK(ps.at("w").grad(0, j) == doctest::Approx(row(0, j)).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and match softmax_temp at tau 1") {
  RngStream rng(8);
  GradTape t;
  Matrix x = random_matrix(rng, 4, 6, 2.0);
  auto y = t.softmax_rows(t.constant(x));
  const Matrix& Y = t.value(y);
  for (Index r = 0; r < 4; ++r) {
    CHECK(std::abs(Y.row(r).sum() - 1.0) < 1e-12);
    Vector ref = softmax_temp(x.row(r).transpose(), 1.0);
    for (Index c = 0; c < 6; ++c) CHECK(Y(r, c) == ref[c]);
  }
}

TEST_CASE("frozen params never receive gradients") {
  ParamStore ps;
  RngStream rng(4);
  ps.add("w", random_matrix(rng, 2, 3));
  ps.add("frozen", random_matrix(rng, 3, 3), /*trainable=*/false);
  GradTape t;
  auto h = t.matmul(t.param(ps, "w"), t.param(ps, "frozen"));
  auto loss = t.cross_entropy_rows(h, {0, 1}, {0, 1});
  t.backward(loss);
  CHECK(ps.at("frozen").grad.isZero(0.0));
  CHECK(ps.at("w").grad.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("backward on constant-only graph is a no-op") {
  GradTape t;
  auto a = t.constant(Matrix::Ones(2, 2));
  auto loss = t.cross_entropy_rows(a, {0}, {1});
  t.backward(loss);  // nothing trainable; must not throw
  CHECK(t.scalar(loss) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("weight tying accumulates gradients from every use") {
  ParamStore ps;
  RngStream rng(5);
  ps.add("e", random_matrix(rng, 3, 3));
  GradTape t;
  auto e = t.param(ps, "e");
  auto x = t.matmul(e, t.transpose(e));  // same param used twice
  auto loss = t.cross_entropy_rows(x, {0, 1, 2}, {0, 1, 2});
  t.backward(loss);
  Matrix tied = ps.at("e").grad;

  // Oracle: finite differences through the tied graph.
  auto loss_fn = [&](bool with_grad) {
    GradTape t2;
    auto e2 = t2.param(ps, "e");
    auto x2 = t2.matmul(e2, t2.transpose(e2));
    auto l2 = t2.cross_entropy_rows(x2, {0, 1, 2}, {0, 1, 2});
    if (with_grad) t2.backward(l2);
    return t2.scalar(l2);
  };
  auto rep = check_gradients(ps, loss_fn, 1e-5, 1e-4);
  CHECK(rep.max_rel_error < 1e-4);
  CHECK(rep.entries_checked == 9);
  CHECK(tied.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("gradient check across the full op set") {
  ParamStore ps;
  RngStream rng(77);
  ps.add("table", random_matrix(rng, 5, 6));
  ps.add("w1", random_matrix(rng, 6, 8, 0.5));
  ps.add("b1", random_matrix(rng, 1, 8, 0.1));
  ps.add("gain", Matrix::Ones(1, 8));
  ps.add("bias", Matrix::Zero(1, 8));
  ps.add("w2", random_matrix(rng, 4, 8, 0.5));
  ps.add("frozen", random_matrix(rng, 8, 8), /*trainable=*/false);
  const Matrix mask = random_matrix(rng, 4, 8, 1.0).cwiseAbs();

  auto loss_fn = [&](bool with_grad) {
    GradTape t;
    auto tab = t.param(ps, "table");
    auto x = t.gather_rows(tab, {0, 2, 4, 1});           // 4 x 6
    auto h = t.matmul(x, t.param(ps, "w1"));             // 4 x 8
    h = t.add_rowvec(h, t.param(ps, "b1"));
    h = t.layer_norm_rows(h, t.param(ps, "gain"), t.param(ps, "bias"));
    h = t.gelu_op(h);
    h = t.hadamard(h, t.constant(mask));
    h = t.matmul(h, t.param(ps, "frozen"));
    h = t.l2_normalize_rows(h);
    auto left = t.slice_cols(h, 0, 5);                   // 4 x 5
    auto right = t.slice_cols(h, 5, 3);                  // 4 x 3
    auto wide = t.concat_cols(right, left);              // 4 x 8
    auto top = t.slice_rows(wide, 0, 2);
    auto bot = t.slice_rows(wide, 2, 2);
    auto stack = t.concat_rows(t.scale(top, 1.5), bot);  // 4 x 8
    auto att = t.softmax_rows(t.matmul(stack, t.transpose(stack)));  // 4 x 4
    auto mixed = t.matmul(att, stack);                   // 4 x 8
    auto diff = t.sub(mixed, t.scale(stack, 0.25));
    auto logits = t.matmul(diff, t.transpose(t.param(ps, "w2")));  // 4 x 4
    auto l = t.cross_entropy_rows(logits, {0, 1, 2, 3}, {0, 1, 2, 3});
    if (with_grad) t.backward(l);
    return t.scalar(l);
  };

  auto rep = check_gradients(ps, loss_fn, 1e-5, 1e-4);
  INFO("worst " << rep.worst_param << " rel " << rep.max_rel_error);
  CHECK(rep.max_rel_error < 1e-4);
  CHECK(rep.entries_over_tol == 0);
  // frozen matrix contributes to the loss but is skipped by the checker
  CHECK(rep.entries_checked ==
        ps.count_scalars(/*trainable_only=*/true));
}

TEST_CASE("tape shape errors throw UsageError") {
  GradTape t;
  auto a = t.constant(Matrix::Zero(2, 3));
  auto b = t.constant(Matrix::Zero(2, 3));
  CHECK_THROWS_AS(t.matmul(a, b), UsageError);
  CHECK_THROWS_AS(t.slice_rows(a, 1, 5), UsageError);
  CHECK_THROWS_AS(t.cross_entropy_rows(a, {}, {}), UsageError);
  CHECK_THROWS_AS(t.backward(a), UsageError);
}

TEST_CASE("layer_norm_rows normalizes and respects gain and bias") {
  GradTape t;
  RngStream rng(12);
  Matrix x = random_matrix(rng, 3, 16, 2.0);
  Matrix gain = Matrix::Constant(1, 16, 2.0);
  Matrix bias = Matrix::Constant(1, 16, -1.0);
  auto y = t.layer_norm_rows(t.constant(x), t.constant(gain), t.constant(bias));
  const Matrix& Y = t.value(y);
  for (Index r = 0; r < 3; ++r) {
    // y = 2 xhat - 1 where xhat has mean 0 and unit population variance
    const double mean = Y.row(r).mean();
    CHECK(mean == doctest::Approx(-1.0).epsilon(1e-9));
    const double var = (Y.row(r).array() - mean).square().sum() / 16.0;
    CHECK(var == doctest::Approx(4.0).epsilon(1e-4));
  }
}
