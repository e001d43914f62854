#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "circuit_lens/decomp.hpp"
#include "circuit_lens/tokens.hpp"

namespace circuit_lens {

// Positionally normalized softmax denominator Σ_i pos_i · content_{y_i} with
// the attending token t substituted at position n.
struct DenomSample {
  Index head = 0;
  Index position = 0;
  TokenId token = 0;
  double value = 0;
  double log_value = 0;
};

template <typename Scalar>
DenomSample denom(const Folded<Scalar>& m, const KeyGeometry<Scalar>& g, Index h, Index n,
                  TokenId t, std::span<const TokenId> x) {
  detail::check_head(h, m.dims);
  detail::check_token(t, m.dims);
  detail::check_position(n, static_cast<Index>(x.size()), m.dims.n_ctx);
  std::vector<TokenId> y(x.begin(), x.begin() + n);
  y.back() = t;
  detail::check_tokens(y, m.dims);
  const Vec<Scalar> q = query(m, h, n, t);
  const Vec<Scalar> log_terms = positional_log_kernel(m, g, h, n, q) + log_content_factors(m, g, h, n, q, y);
  DenomSample s{h, n, t, 0, static_cast<double>(log_sum_exp(log_terms))};
  s.value = std::exp(s.log_value);
  if (!(s.value > 0) || !std::isfinite(s.value))
    fail(ErrorCode::NonFinite, "denominator is not a positive finite number");
  return s;
}

// Per-position cross-text normalizer c_{h,i}: the corpus mean of denom(h, i, t, x).
struct DenomNormalizer {
  Index head = 0;
  TokenId token = 0;
  std::vector<Index> positions;
  std::vector<double> values;
  std::size_t corpus_size = 0;
};

template <typename Scalar>
DenomNormalizer denom_normalizer(const Folded<Scalar>& m, const KeyGeometry<Scalar>& g, Index h,
                                 TokenId t, const Corpus& corpus, std::span<const Index> positions) {
  if (corpus.sequences.empty()) fail(ErrorCode::EmptyCorpus, "normalizer needs at least one text");
  DenomNormalizer out{h, t, {positions.begin(), positions.end()}, {}, corpus.sequences.size()};
  out.values.assign(positions.size(), 0.0);
  for (const auto& seq : corpus.sequences) {
    for (std::size_t k = 0; k < positions.size(); ++k) {
      if (positions[k] > seq.size())
        fail(ErrorCode::TooShort, "text '" + seq.label + "' is shorter than position " +
                                      std::to_string(positions[k]));
      out.values[k] += denom(m, g, h, positions[k], t, seq.view()).value;
    }
  }
  for (double& v : out.values) v /= static_cast<double>(corpus.sequences.size());
  return out;
}

// Inputs to the concentration bounds on Σ_{i<n} pos_i · content_{x_i}.
struct ConcentrationInputs {
  std::vector<double> kernel;  // pos_1..pos_n; the last entry is the attending position
  std::optional<double> lower, upper;  // A, B
  std::optional<double> variance;      // σ²
  double mean = 0;                     // μ = E[content]
  double deviation = 0;                // t
};

// Σ_{i<n} pos_i²
double kernel_spread(std::span<const double> kernel);

double hoeffding_bound(const ConcentrationInputs& ci);
double chebyshev_bound(const ConcentrationInputs& ci);

struct ContentStats {
  double mean = 0;
  double variance = 0;
  double lower = 0;  // A: smallest factor on the support
  double upper = 0;  // B: largest factor on the support
};

// Moments and range of content(t_i, t_n) for t_i drawn from `dist` over the vocabulary.
template <typename Scalar>
ContentStats content_stats(const Folded<Scalar>& m, const KeyGeometry<Scalar>& g, Index h, Index n,
                           TokenId t_n, const Eigen::VectorXd& dist) {
  if (dist.size() != m.dims.d_voc)
    fail(ErrorCode::LengthMismatch, "distribution must cover the vocabulary");
  if (std::abs(dist.sum() - 1.0) > 1e-6 || (dist.array() < 0).any())
    fail(ErrorCode::NotNormalized, "token distribution must be non-negative and sum to 1");
  const Vec<Scalar> q = query(m, h, n, t_n);
  const Eigen::VectorXd factors =
      log_content_factors_vocab(m, g, h, n, q).template cast<double>().array().exp().matrix();
  ContentStats s;
  s.mean = dist.dot(factors);
  s.lower = std::numeric_limits<double>::infinity();
  s.upper = -std::numeric_limits<double>::infinity();
  for (Index t = 0; t < dist.size(); ++t) {
    if (dist(t) <= 0) continue;
    s.variance += dist(t) * (factors(t) - s.mean) * (factors(t) - s.mean);
    s.lower = std::min(s.lower, factors(t));
    s.upper = std::max(s.upper, factors(t));
  }
  return s;
}

// Unigram frequencies of a corpus over the vocabulary.
Eigen::VectorXd unigram_distribution(const Corpus& corpus, Index d_voc);

// One synthetic i.i.d. configuration: content factors take `values[k]` with
// probability `probs[k]`, independently at each position before the last.
struct MonteCarloCell {
  std::vector<double> kernel;
  std::vector<double> values;
  std::vector<double> probs;
  double deviation = 0;
};

struct MonteCarloResult {
  std::size_t trials = 0;
  std::size_t exceed = 0;
  double empirical = 0;  // fraction of trials with |S − (1 − pos_n) μ| ≥ t
  double hoeffding = 0;
  double chebyshev = 0;
  double mean = 0;
  double variance = 0;
};

// Draws are taken from a stream keyed by (seed, stream_id) so results do not
// depend on how cells are scheduled across workers.
MonteCarloResult simulate_deviation(const MonteCarloCell& cell, std::size_t trials,
                                    std::uint64_t seed, std::uint64_t stream_id);

// Standard deviation divided by mean.
double relative_spread(std::span<const double> values);

}  // namespace circuit_lens
