#include "circuit_lens/stability.hpp"

#include <cmath>
#include <numeric>

namespace circuit_lens {

double kernel_spread(std::span<const double> kernel) {
  double s = 0;
  for (std::size_t i = 0; i + 1 < kernel.size(); ++i) s += kernel[i] * kernel[i];
  return s;
}

namespace {

void check_deviation(double t) {
  if (!(t > 0)) fail(ErrorCode::ConfigError, "deviation t must be positive");
}

}  // namespace

double hoeffding_bound(const ConcentrationInputs& ci) {
  if (!ci.lower || !ci.upper) fail(ErrorCode::MissingBounds, "Hoeffding needs content bounds A and B");
  if (*ci.lower > *ci.upper) fail(ErrorCode::MissingBounds, "content bounds need A <= B");
  check_deviation(ci.deviation);
  const double range = *ci.upper - *ci.lower;
  const double scale = kernel_spread(ci.kernel) * range * range;
  if (scale <= 0) return 0.0;
  return std::min(1.0, std::exp(-2.0 * ci.deviation * ci.deviation / scale));
}

double chebyshev_bound(const ConcentrationInputs& ci) {
  if (!ci.variance || *ci.variance < 0)
    fail(ErrorCode::MissingVariance, "Chebyshev needs a non-negative content variance");
  check_deviation(ci.deviation);
  return std::min(1.0, kernel_spread(ci.kernel) * *ci.variance / (ci.deviation * ci.deviation));
}

Eigen::VectorXd unigram_distribution(const Corpus& corpus, Index d_voc) {
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(d_voc);
  double total = 0;
  for (const auto& seq : corpus.sequences) {
    validate_tokens(seq.view(), d_voc);
    for (TokenId t : seq.ids) counts(t) += 1;
    total += static_cast<double>(seq.ids.size());
  }
  if (total == 0) fail(ErrorCode::EmptyCorpus, "no tokens to count");
  return counts / total;
}

MonteCarloResult simulate_deviation(const MonteCarloCell& cell, std::size_t trials,
                                    std::uint64_t seed, std::uint64_t stream_id) {
  if (cell.values.size() != cell.probs.size() || cell.values.empty())
    fail(ErrorCode::LengthMismatch, "content values and probabilities must pair up");
  if (cell.kernel.empty()) fail(ErrorCode::LengthMismatch, "kernel is empty");
  const double psum = std::accumulate(cell.probs.begin(), cell.probs.end(), 0.0);
  if (std::abs(psum - 1.0) > 1e-9) fail(ErrorCode::NotNormalized, "probabilities must sum to 1");

  MonteCarloResult r;
  for (std::size_t k = 0; k < cell.values.size(); ++k) r.mean += cell.probs[k] * cell.values[k];
  for (std::size_t k = 0; k < cell.values.size(); ++k)
    r.variance += cell.probs[k] * (cell.values[k] - r.mean) * (cell.values[k] - r.mean);

  ConcentrationInputs ci;
  ci.kernel = cell.kernel;
  ci.lower = *std::min_element(cell.values.begin(), cell.values.end());
  ci.upper = *std::max_element(cell.values.begin(), cell.values.end());
  ci.variance = r.variance;
  ci.mean = r.mean;
  ci.deviation = cell.deviation;
  r.hoeffding = hoeffding_bound(ci);
  r.chebyshev = chebyshev_bound(ci);

  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream_id), static_cast<std::uint32_t>(stream_id >> 32)};
  std::mt19937_64 rng(seq);
  std::discrete_distribution<std::size_t> draw(cell.probs.begin(), cell.probs.end());
  const std::size_t n = cell.kernel.size();
  const double centre = (1.0 - cell.kernel.back()) * r.mean;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    double s = 0;
    for (std::size_t i = 0; i + 1 < n; ++i) s += cell.kernel[i] * cell.values[draw(rng)];
    if (std::abs(s - centre) >= cell.deviation) ++r.exceed;
  }
  r.trials = trials;
  r.empirical = trials ? static_cast<double>(r.exceed) / static_cast<double>(trials) : 0.0;
  return r;
}

double relative_spread(std::span<const double> values) {
  if (values.size() < 2) fail(ErrorCode::TooShort, "spread needs at least two values");
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double var = 0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  return std::sqrt(var) / mean;
}

}  // namespace circuit_lens
