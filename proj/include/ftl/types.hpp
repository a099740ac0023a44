#pragma once

#include <Eigen/Dense>

namespace ftl {

inline constexpr auto Dyn = Eigen::Dynamic;

// Dense row-major matrix of scalar T; the carrier for features, weights and
// kernels throughout the library.
template <typename T>
using Mat = Eigen::Matrix<T, Dyn, Dyn, Eigen::RowMajor>;

template <typename T>
using Vec = Eigen::Matrix<T, Dyn, 1>;

using Matrix = Mat<double>;
using Vector = Vec<double>;
using Index = Eigen::Index;

}  // namespace ftl
