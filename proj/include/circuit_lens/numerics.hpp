#pragma once

#include <cmath>
#include <limits>

#include "circuit_lens/common.hpp"

namespace circuit_lens {

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  if (x.size() == 0) return -std::numeric_limits<S>::infinity();
  const S peak = x.maxCoeff();
  if (!std::isfinite(peak)) return peak;
  return peak + std::log((x.array() - peak).exp().sum());
}

// Max-subtracted softmax of a score vector.
template <typename Derived>
Vec<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& scores) {
  using S = typename Derived::Scalar;
  Vec<S> p = (scores.array() - scores.maxCoeff()).exp().matrix();
  p /= p.sum();
  return p;
}

// √d · (v − mean(v)) / ‖v − mean(v)‖ : LayerNorm without gain, bias or epsilon.
template <typename Derived>
RowVec<typename Derived::Scalar> layer_norm_direction(const Eigen::MatrixBase<Derived>& v) {
  using S = typename Derived::Scalar;
  RowVec<S> c = v.reshaped().transpose();
  c.array() -= c.mean();
  return c * (std::sqrt(static_cast<S>(c.size())) / c.norm());
}

}  // namespace circuit_lens
