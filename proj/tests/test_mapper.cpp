#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "mats/error.hpp"
#include "mats/gradcheck.hpp"
#include "mats/mapper.hpp"
#include "mats/rng.hpp"

using namespace mats;

namespace {

MapperShape tiny_shape() {
  MapperShape s;
  s.queries = 3;
  s.d_in = 6;
  s.d_model = 8;
  s.d_dec = 10;
  s.n_layers = 2;
  s.n_heads = 2;
  return s;
}

Vector random_embedding(Index d, std::uint64_t seed) {
  RngStream rng(seed);
  Vector z(d);
  for (Index i = 0; i < d; ++i) z[i] = rng.next_gaussian();
  return z;
}

}  // namespace

TEST_CASE("mapper init is deterministic and counts its parameters") {
  MapperShape s = tiny_shape();
  ParamStore a, b;
  init_mapper(a, s, 5);
  init_mapper(b, s, 5);
  CHECK(a.digest_prefix("mapper.") == b.digest_prefix("mapper."));

  ParamStore c;
  init_mapper(c, s, 6);
  CHECK(c.digest_prefix("mapper.") != a.digest_prefix("mapper."));

  CHECK(a.count_scalars(/*trainable_only=*/true) == mapper_param_count(s));

  const double limit = 1.0 / std::sqrt(static_cast<double>(s.d_model));
  CHECK(a.at("mapper.queries").value.cwiseAbs().maxCoeff() <= limit);
  CHECK(a.at("mapper.blk0.ffn.w1").value.cwiseAbs().maxCoeff() <= limit);
  CHECK(a.at("mapper.blk1.ln2.g").value.cwiseEqual(Matrix::Ones(1, s.d_model))
            .all());
}

TEST_CASE("mapper shape validation") {
  ParamStore ps;
  MapperShape bad = tiny_shape();
  bad.n_heads = 3;  // does not divide d_model=8
  CHECK_THROWS_AS(init_mapper(ps, bad, 1), ConfigError);
  MapperShape zero = tiny_shape();
  zero.queries = 0;
  CHECK_THROWS_AS(init_mapper(ps, zero, 1), ConfigError);
}

TEST_CASE("mapper forward shape, purity, and input guards") {
  MapperShape s = tiny_shape();
  ParamStore ps;
  init_mapper(ps, s, 7);
  Vector z = random_embedding(s.d_in, 3);

  GradTape t1;
  Matrix p1 = t1.value(mapper_forward(t1, ps, s, z));
  CHECK(p1.rows() == s.queries);
  CHECK(p1.cols() == s.d_dec);

  GradTape t2;
  Matrix p2 = t2.value(mapper_forward(t2, ps, s, z));
  CHECK(p1.cwiseEqual(p2).all());
  CHECK(p1.cwiseEqual(mapper_apply(ps, s, z)).all());

  Vector bad_dim = random_embedding(s.d_in + 1, 3);
  GradTape t3;
  CHECK_THROWS_AS(mapper_forward(t3, ps, s, bad_dim), UsageError);

  Vector nan = z;
  nan[0] = std::numeric_limits<double>::quiet_NaN();
  GradTape t4;
  CHECK_THROWS_AS(mapper_forward(t4, ps, s, nan), NumericError);
}

TEST_CASE("distinct inputs yield distinct prefixes") {
  MapperShape s = tiny_shape();
  ParamStore ps;
  init_mapper(ps, s, 11);

  Vector a = Vector::Zero(s.d_in);
  a[0] = 1.0;
  Vector b = Vector::Zero(s.d_in);
  b[1] = 1.0;  // orthogonal to a
  Matrix pa = mapper_apply(ps, s, a);
  Matrix pb = mapper_apply(ps, s, b);
  CHECK((pa - pb).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("permuting query rows permutes prefix rows") {
  MapperShape s = tiny_shape();
  ParamStore ps;
  init_mapper(ps, s, 13);
  Vector z = random_embedding(s.d_in, 9);
  Matrix base = mapper_apply(ps, s, z);

  const std::vector<Index> perm = {2, 0, 1};
  ParamStore permuted;
  init_mapper(permuted, s, 13);
  Matrix& q = permuted.at("mapper.queries").value;
  Matrix orig = q;
  for (Index i = 0; i < s.queries; ++i)
    q.row(i) = orig.row(perm[static_cast<std::size_t>(i)]);

  Matrix out = mapper_apply(permuted, s, z);
  for (Index i = 0; i < s.queries; ++i)
    CHECK((out.row(i) - base.row(perm[static_cast<std::size_t>(i)]))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
}

TEST_CASE("gradient reaches every mapper parameter") {
  MapperShape s = tiny_shape();
  ParamStore ps;
  init_mapper(ps, s, 17);
  Vector z = random_embedding(s.d_in, 21);

  GradTape t;
  GradTape::Ref prefix = mapper_forward(t, ps, s, z);
  // Scalar objective: sum of squares of the prefix.
  GradTape::Ref flatq = t.hadamard(prefix, prefix);
  GradTape::Ref ones_l = t.constant(Matrix::Ones(1, s.queries));
  GradTape::Ref ones_r = t.constant(Matrix::Ones(s.d_dec, 1));
  GradTape::Ref loss = t.matmul(t.matmul(ones_l, flatq), ones_r);
  ps.zero_grads();
  t.backward(loss);

  for (const auto& name : ps.names_with_prefix("mapper.")) {
    INFO("param: " << name);
    CHECK(ps.at(name).grad.cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("mapper gradients match central differences") {
  MapperShape s;
  s.queries = 2;
  s.d_in = 4;
  s.d_model = 4;
  s.d_dec = 3;
  s.n_layers = 1;
  s.n_heads = 2;
  ParamStore ps;
  init_mapper(ps, s, 23);
  Vector z = random_embedding(s.d_in, 31);
  Matrix target = Matrix::Ones(s.queries, s.d_dec) * 0.25;

  auto loss_fn = [&](bool with_grad) {
    GradTape t;
    GradTape::Ref prefix = mapper_forward(t, ps, s, z);
    GradTape::Ref err = t.sub(prefix, t.constant(target));
    GradTape::Ref sq = t.hadamard(err, err);
    GradTape::Ref loss = t.matmul(
        t.matmul(t.constant(Matrix::Ones(1, s.queries)), sq),
        t.constant(Matrix::Ones(s.d_dec, 1)));
    if (with_grad) t.backward(loss);
    return t.scalar(loss);
  };

  GradCheckReport rep = check_gradients(ps, loss_fn);
  INFO("worst: " << rep.worst_param << " rel " << rep.max_rel_error);
  CHECK(rep.max_rel_error < 1e-4);
  CHECK(rep.entries_over_tol == 0);
  CHECK(rep.entries_checked == ps.count_scalars(true));
}
