#pragma once

#include <cmath>
#include <limits>

#include "alignlab/types.hpp"

// Small numerically careful kernels shared by the autodiff layer, the
// oracles, and the tests. Free functions over Eigen expressions so callers
// can pass blocks and temporaries without copies.

namespace alignlab {

/// Row-wise softmax with the usual max-shift for stability.
template <typename Derived>
Matrix row_softmax(const Eigen::MatrixBase<Derived>& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar m = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

/// Row-wise log-softmax: x - max - log(sum(exp(x - max))).
template <typename Derived>
Matrix row_log_softmax(const Eigen::MatrixBase<Derived>& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar m = x.row(i).maxCoeff();
    const Scalar lse = std::log((x.row(i).array() - m).exp().sum());
    out.row(i) = x.row(i).array() - m - lse;
  }
  return out;
}

/// log(sigmoid(x)) without overflow on either tail.
inline Scalar log_sigmoid(Scalar x) {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

inline Scalar sigmoid(Scalar x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (1.0 + e);
}

/// Index of the row maximum; ties resolve to the lowest index so greedy
/// choices are reproducible.
template <typename Derived>
int argmax_lowest(const Eigen::MatrixBase<Derived>& row) {
  int best = 0;
  for (Eigen::Index j = 1; j < row.size(); ++j) {
    if (row(j) > row(best)) best = static_cast<int>(j);
  }
  return best;
}

}  // namespace alignlab
