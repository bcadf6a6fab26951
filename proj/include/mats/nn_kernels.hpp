#pragma once

#include <cmath>
#include <numbers>

#include "mats/types.hpp"

namespace mats {

// Forward kernels shared by the autodiff tape and the no-grad inference path,
// so both produce bit-identical values for the same inputs.

// Scalar-loop softmax so every call site computes bit-identically to
// softmax_temp at tau 1, independent of Eigen's packet math.
inline void softmax_rows_inplace(Matrix& x) {
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    double sum = 0.0;
    for (Index c = 0; c < x.cols(); ++c) {
      x(r, c) = std::exp(x(r, c) - m);
      sum += x(r, c);
    }
    for (Index c = 0; c < x.cols(); ++c) x(r, c) /= sum;
  }
}

inline double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
}

inline double gelu_grad_scalar(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf =
      std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline Matrix gelu(const Matrix& x) {
  return x.unaryExpr([](double v) { return gelu_scalar(v); });
}

// Row-wise layer norm with population variance. gain/bias are 1 x C.
// When xhat/inv_std are given they receive the normalized rows and 1/std,
// which the tape's backward pass needs.
inline Matrix layer_norm_rows(const Matrix& x, const Matrix& gain,
                              const Matrix& bias, double eps,
                              Matrix* xhat_out = nullptr,
                              Vector* inv_std_out = nullptr) {
  const Index n = x.cols();
  Matrix xhat(x.rows(), x.cols());
  Vector inv(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var =
        (x.row(r).array() - mu).square().sum() / static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv[r] = is;
    xhat.row(r) = (x.row(r).array() - mu) * is;
  }
  Matrix y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r)
    y.row(r) = xhat.row(r).cwiseProduct(gain.row(0)) + bias.row(0);
  if (xhat_out) *xhat_out = std::move(xhat);
  if (inv_std_out) *inv_std_out = std::move(inv);
  return y;
}

// log(sum(exp(row))) with max subtraction.
inline double logsumexp_row(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  const double m = row.maxCoeff();
  return m + std::log((row.array() - m).exp().sum());
}

// Sinusoidal position table, one row per position. Deterministic, no
// learnable state; both training and generation add these rows.
inline Matrix sinusoid_positions(Index max_len, Index dim) {
  Matrix p(max_len, dim);
  for (Index pos = 0; pos < max_len; ++pos) {
    for (Index i = 0; i < dim; ++i) {
      const double angle =
          static_cast<double>(pos) /
          std::pow(10000.0, 2.0 * static_cast<double>(i / 2) /
                                static_cast<double>(dim));
      p(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return p;
}

}  // namespace mats
