#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "mats/digest.hpp"
#include "mats/error.hpp"
#include "mats/metrics.hpp"
#include "mats/rng.hpp"

using namespace mats;

TEST_CASE("pairwise_metric anchors") {
  Vector a(3), b(3);
  a << 1, 2, 3;
  b << 1, 0, 7;
  CHECK(pairwise_metric(Metric::inf, a, b) == 4.0);
  CHECK(pairwise_metric(Metric::dot, a, b) == doctest::Approx(22.0));
  CHECK(pairwise_metric(Metric::sq_l2, a, b) == doctest::Approx(20.0));
}

TEST_CASE("pairwise_metric sq_l2 symmetric, zero iff equal on dyadics") {
  Vector a(4), b(4);
  a << 0.5, -0.25, 3.0, 1.125;
  b << -1.5, 0.75, 3.0, 2.0;
  CHECK(pairwise_metric(Metric::sq_l2, a, b) ==
        pairwise_metric(Metric::sq_l2, b, a));
  CHECK(pairwise_metric(Metric::sq_l2, a, a) == 0.0);
  CHECK(pairwise_metric(Metric::sq_l2, a, b) > 0.0);
}

TEST_CASE("pairwise_metric rejects dimension mismatch") {
  Vector a(3), b(2);
  a.setZero();
  b.setZero();
  CHECK_THROWS_AS(pairwise_metric(Metric::dot, a, b), UsageError);
}

TEST_CASE("softmax_temp two-point anchor") {
  Vector s(2);
  s << 1, 0;
  Vector p = softmax_temp(s, 1.0);
  CHECK(p[0] == doctest::Approx(0.7310586).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(0.2689414).epsilon(1e-6));
}

TEST_CASE("softmax_temp sums to one and is shift invariant") {
  RngStream rng(7);
  for (double tau : {0.01, 0.1, 1.0}) {
    Vector s(5);
    s << 1.0, 0.5, -2.0, 0.25, -0.75;  // dyadic, so s + 4 is exact
    Vector p = softmax_temp(s, tau);
    CHECK(std::abs(p.sum() - 1.0) < 1e-12);
    Vector shifted = s.array() + 4.0;
    Vector q = softmax_temp(shifted, tau);
    for (int i = 0; i < 5; ++i) CHECK(p[i] == q[i]);
  }
  for (int trial = 0; trial < 50; ++trial) {
    Vector s(8);
    for (int i = 0; i < 8; ++i) s[i] = 3.0 * rng.next_gaussian();
    Vector p = softmax_temp(s, 0.37);
    CHECK(std::abs(p.sum() - 1.0) < 1e-12);
    CHECK(p.minCoeff() >= 0.0);
  }
}

TEST_CASE("softmax_temp low temperature concentrates on argmax") {
  Vector s(4);
  s << 0.1, 0.9, 0.3, 0.89;
  Vector p = softmax_temp(s, 1e-3);
  CHECK(p[1] > 1.0 - 1e-4);
}

TEST_CASE("softmax_temp precondition failures") {
  Vector s(2);
  s << 1, 2;
  CHECK_THROWS_AS(softmax_temp(s, 0.0), UsageError);
  CHECK_THROWS_AS(softmax_temp(s, -1.0), UsageError);
  CHECK_THROWS_AS(softmax_temp(Vector(), 1.0), UsageError);
}

TEST_CASE("sample_gaussian sigma zero is exactly zero and consumes no state") {
  RngStream rng(123);
  const auto c0 = rng.counter();
  Vector v = sample_gaussian(rng, 16, 0.0);
  CHECK(v.isZero(0.0));
  CHECK(rng.counter() == c0);
  CHECK_THROWS_AS(sample_gaussian(rng, 4, -0.1), UsageError);
}

TEST_CASE("sample_gaussian reproducible from (seed, counter)") {
  RngStream a(42), b(42);
  Vector va = sample_gaussian(a, 8, 0.5);
  Vector vb = sample_gaussian(b, 8, 0.5);
  for (int i = 0; i < 8; ++i) CHECK(va[i] == vb[i]);
  RngStream c(42, a.counter());
  Vector v2a = sample_gaussian(a, 8, 0.5);
  Vector v2c = sample_gaussian(c, 8, 0.5);
  for (int i = 0; i < 8; ++i) CHECK(v2a[i] == v2c[i]);
}

TEST_CASE("sample_gaussian Monte Carlo std band") {
  RngStream rng(2024);
  const int draws = 100000;
  const int dim = 512;
  const double sigma = 0.015;
  double sum = 0.0, sumsq = 0.0;
  for (int t = 0; t < draws; ++t) {
    Vector v = sample_gaussian(rng, dim, sigma);
    sum += v.sum();
    sumsq += v.squaredNorm();
  }
  const double n = static_cast<double>(draws) * dim;
  const double mean = sum / n;
  const double sd = std::sqrt(sumsq / n - mean * mean);
  CHECK(sd > 0.0147);
  CHECK(sd < 0.0153);
  CHECK(std::abs(mean) < 1e-4);
}

TEST_CASE("rng forks are independent and deterministic") {
  RngStream base(99);
  RngStream f1 = base.fork("alpha");
  RngStream f2 = base.fork("beta");
  RngStream f1again = base.fork("alpha");
  CHECK(f1.next_u64() != f2.next_u64());
  RngStream f1b = base.fork("alpha");
  CHECK(f1again.next_u64() == f1b.next_u64());
  RngStream i0 = base.fork_index(0);
  RngStream i1 = base.fork_index(1);
  CHECK(i0.next_u64() != i1.next_u64());
}

TEST_CASE("rng uniform range and coverage") {
  RngStream rng(5);
  double mn = 1.0, mx = 0.0;
  for (int i = 0; i < 10000; ++i) {
    double u = rng.next_uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    mn = std::min(mn, u);
    mx = std::max(mx, u);
  }
  CHECK(mn < 0.01);
  CHECK(mx > 0.99);
}

TEST_CASE("shuffled_indices is a deterministic permutation") {
  RngStream rng(11);
  auto p1 = shuffled_indices(100, rng.fork("s"));
  auto p2 = shuffled_indices(100, rng.fork("s"));
  CHECK(p1 == p2);
  std::set<std::int64_t> seen(p1.begin(), p1.end());
  CHECK(seen.size() == 100);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 99);
  bool moved = false;
  for (std::size_t i = 0; i < p1.size(); ++i)
    if (p1[i] != static_cast<std::int64_t>(i)) moved = true;
  CHECK(moved);
}

TEST_CASE("spearman_rho monotone anchors") {
  std::vector<double> x{0.0, 0.25, 0.5, 1.0};
  std::vector<double> up{0.1, 0.2, 0.4, 0.9};
  std::vector<double> down{0.9, 0.4, 0.2, 0.1};
  CHECK(spearman_rho(x, up) == doctest::Approx(1.0));
  CHECK(spearman_rho(x, down) == doctest::Approx(-1.0));
  std::vector<double> tied{0.1, 0.1, 0.4, 0.9};
  CHECK(spearman_rho(x, tied) > 0.9);
}

TEST_CASE("digest matches a reference FNV-1a implementation") {
  auto ref = [](const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001B3ULL;
    }
    return h;
  };
  CHECK(Digest().str("abc").value() == ref("abc"));
  CHECK(Digest().str("").value() == ref(""));
  CHECK(digest_hex("abc") != digest_hex("abd"));
  Matrix m = Matrix::Zero(2, 2);
  Matrix m2 = m;
  m2(1, 1) = 1e-300;  // tiny but representable difference must change digest
  CHECK(Digest().matrix(m).hex() != Digest().matrix(m2).hex());
  CHECK(Digest().matrix(m).hex() == Digest().matrix(Matrix::Zero(2, 2)).hex());
}
