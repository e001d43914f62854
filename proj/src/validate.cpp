#include "circuit_lens/validate.hpp"

#include <algorithm>
#include <cmath>

namespace circuit_lens {

FitStats fit_stats(std::span<const double> truth, std::span<const double> approx) {
  if (truth.size() != approx.size())
    fail(ErrorCode::LengthMismatch, "series lengths differ: " + std::to_string(truth.size()) + " vs " +
                                        std::to_string(approx.size()));
  if (truth.size() < 2) fail(ErrorCode::TooShort, "fit needs at least two samples");
  const auto n = static_cast<double>(truth.size());
  double mt = 0, ma = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    mt += truth[i];
    ma += approx[i];
  }
  mt /= n;
  ma /= n;
  double vt = 0, va = 0, cov = 0, sse = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double dt = truth[i] - mt, da = approx[i] - ma;
    vt += dt * dt;
    va += da * da;
    cov += dt * da;
    sse += (approx[i] - truth[i]) * (approx[i] - truth[i]);
  }
  if (!(vt > 0)) fail(ErrorCode::DegenerateVariance, "true series is constant");
  FitStats s;
  s.count = truth.size();
  s.fvu = sse / vt;
  s.bias = ma - mt;
  s.r_defined = va > 0;
  s.r = s.r_defined ? std::clamp(cov / std::sqrt(vt * va), -1.0, 1.0) : 0.0;
  return s;
}

std::vector<Index> position_grid(Index length, Index stride, Index n_ctx) {
  if (stride < 1) fail(ErrorCode::ConfigError, "grid stride must be at least 1");
  std::vector<Index> grid;
  for (Index n = stride; n <= std::min(length, n_ctx); n += stride) grid.push_back(n);
  return grid;
}

double median(std::vector<double> values) {
  if (values.empty()) fail(ErrorCode::TooShort, "median of no values");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double hi = values[mid];
  if (values.size() % 2) return hi;
  return 0.5 * (hi + *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid)));
}

}  // namespace circuit_lens
