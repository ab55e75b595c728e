#pragma once

#include <Eigen/Dense>

#include <cstdint>

namespace nmrf {

// Row-major dense matrices throughout: token rows are contiguous, which keeps
// row gathers and im2col cheap.
template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatXf = MatX<float>;
using MatXd = MatX<double>;
using MatXi = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatXu8 = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace nmrf
