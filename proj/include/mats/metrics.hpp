#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "mats/error.hpp"
#include "mats/rng.hpp"
#include "mats/types.hpp"

namespace mats {

enum class Metric { dot, sq_l2, inf };

// Scalar similarity/distance between two equal-length vectors. Accepts any
// Eigen vector expression; evaluates lazily where Eigen allows.
template <class DA, class DB>
double pairwise_metric(Metric kind, const Eigen::MatrixBase<DA>& a,
                       const Eigen::MatrixBase<DB>& b) {
  if (a.size() != b.size())
    throw UsageError("pairwise_metric: dimension mismatch (" +
                     std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
  switch (kind) {
    case Metric::dot:
      return a.dot(b);
    case Metric::sq_l2:
      return (a - b).squaredNorm();
    case Metric::inf:
      return (a - b).cwiseAbs().maxCoeff();
  }
  throw UsageError("pairwise_metric: unknown metric kind");
}

// Temperature softmax with max-subtraction. tau must be positive; scores must
// be non-empty. Output sums to 1 up to rounding and is invariant to uniform
// score shifts.
inline Vector softmax_temp(const Vector& scores, double tau) {
  if (scores.size() == 0) throw UsageError("softmax_temp: empty score vector");
  if (!(tau > 0.0)) throw UsageError("softmax_temp: tau must be positive");
  const double m = scores.maxCoeff();
  Vector out(scores.size());
  double sum = 0.0;
  for (Index i = 0; i < scores.size(); ++i) {
    out[i] = std::exp((scores[i] - m) / tau);
    sum += out[i];
  }
  for (Index i = 0; i < scores.size(); ++i) out[i] /= sum;
  return out;
}

// Isotropic Gaussian draw; sigma is the per-coordinate standard deviation.
// sigma == 0 returns the zero vector without consuming rng state.
inline Vector sample_gaussian(RngStream& rng, Index dim, double sigma) {
  if (dim < 0) throw UsageError("sample_gaussian: negative dimension");
  if (sigma < 0.0) throw UsageError("sample_gaussian: negative sigma");
  Vector v = Vector::Zero(dim);
  if (sigma == 0.0) return v;
  for (Index i = 0; i < dim; ++i) v[i] = sigma * rng.next_gaussian();
  return v;
}

// Deterministic Fisher-Yates permutation of [0, n).
inline std::vector<std::int64_t> shuffled_indices(std::int64_t n,
                                                  RngStream rng) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (std::int64_t i = n - 1; i > 0; --i) {
    std::uint64_t j = rng.next_below(static_cast<std::uint64_t>(i) + 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

// Spearman rank correlation with average ranks for ties.
inline double spearman_rho(const std::vector<double>& x,
                           const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw UsageError("spearman_rho: need two equal-length series");
  auto ranks = [](const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> ord(n);
    std::iota(ord.begin(), ord.end(), std::size_t{0});
    std::stable_sort(ord.begin(), ord.end(),
                     [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[ord[j + 1]] == v[ord[i]]) ++j;
      double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[ord[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  std::vector<double> rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace mats
