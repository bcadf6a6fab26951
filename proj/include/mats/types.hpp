#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace mats {

// Dense types. Everything numeric in this library runs in 64-bit floats;
// the templated aliases exist so the few generic routines stay scalar-agnostic.
template <class Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <class Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Vector = VectorT<double>;
using Matrix = MatrixT<double>;

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

using Index = Eigen::Index;

}  // namespace mats
