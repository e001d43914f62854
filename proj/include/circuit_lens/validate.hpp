#pragma once

#include <span>
#include <string>
#include <vector>

#include "circuit_lens/circuit.hpp"

namespace circuit_lens {

struct FitStats {
  double r = 0;
  bool r_defined = true;  // false when the approx series is constant
  double fvu = 0;
  double bias = 0;  // mean(approx − true)
  std::size_t count = 0;
};

FitStats fit_stats(std::span<const double> truth, std::span<const double> approx);

struct SubstitutionSeries {
  std::string label;
  Index neuron = 0;
  std::vector<Index> positions;
  std::vector<double> truth;
  std::vector<double> approx;
};

// Positions stride, 2·stride, ... up to `length`, clipped to [1, n_ctx].
std::vector<Index> position_grid(Index length, Index stride, Index n_ctx);

namespace detail {

inline void check_grid(std::span<const Index> grid, Index length, Index n_ctx) {
  Index prev = 0;
  for (Index n : grid) {
    check_position(n, length, n_ctx);
    if (n <= prev) fail(ErrorCode::ConfigError, "grid positions must be strictly increasing");
    prev = n;
  }
}

}  // namespace detail

// Exact combined OV contribution of `heads` to every neuron at each grid position,
// with t_sub substituted at that position only. Rows follow `grid`.
template <typename Scalar>
Mat<double> true_contributions(const Folded<Scalar>& m, const HeadSet& heads, std::span<const TokenId> x,
                               std::span<const Index> grid, TokenId t_sub) {
  heads.validate(m.dims);
  detail::check_token(t_sub, m.dims);
  detail::check_grid(grid, static_cast<Index>(x.size()), m.dims.n_ctx);
  Mat<double> out(static_cast<Index>(grid.size()), m.dims.d_mlp);
  if (grid.empty()) return out;
  const auto prefix = x.first(static_cast<std::size_t>(grid.back()));
  const auto proj = project(m, prefix);
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const auto probe = probe_position(m, proj, prefix, grid[k], t_sub);
    out.row(static_cast<Index>(k)) = heads_ov_contributions(m, probe, heads.view()).template cast<double>().transpose();
  }
  return out;
}

template <typename Scalar>
SubstitutionSeries true_series(const Folded<Scalar>& m, const HeadSet& heads, const TokenSeq& x, Index j,
                               std::span<const Index> grid, TokenId t_sub) {
  detail::check_neuron(j, m.dims);
  const Mat<double> all = true_contributions(m, heads, x.view(), grid, t_sub);
  SubstitutionSeries s{x.label, j, {grid.begin(), grid.end()}, {}, {}};
  for (Index k = 0; k < all.rows(); ++k) s.truth.push_back(all(k, j));
  return s;
}

// Table-based contributions at each grid position, with the median kernel
// re-anchored to (n, t_sub) at every n. Rows follow `grid`.
template <typename T, typename Scalar>
Mat<double> approx_contributions_grid(const Folded<Scalar>& m, const KeyGeometry<Scalar>& g,
                                      const BasicContributionTable<T>& table, const HeadSet& heads,
                                      std::span<const TokenId> x, std::span<const Index> grid, TokenId t_sub) {
  detail::check_grid(grid, static_cast<Index>(x.size()), m.dims.n_ctx);
  Mat<double> out(static_cast<Index>(grid.size()), table.neurons());
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const auto kernel = median_kernel_at(m, g, heads, grid[k], t_sub);
    out.row(static_cast<Index>(k)) = approx_contributions(table, kernel, x).transpose();
  }
  return out;
}

template <typename T, typename Scalar>
void approx_series(const Folded<Scalar>& m, const KeyGeometry<Scalar>& g, const BasicContributionTable<T>& table,
                   const Calibration<Scalar>& cal, const TokenSeq& x, SubstitutionSeries& s) {
  if (s.neuron < 0 || s.neuron >= table.neurons())
    fail(ErrorCode::NeuronOutOfRange, "neuron " + std::to_string(s.neuron) + " outside table");
  const Mat<double> all = approx_contributions_grid(m, g, table, cal.heads, x.view(), s.positions, cal.token);
  s.approx.clear();
  for (Index k = 0; k < all.rows(); ++k) s.approx.push_back(all(k, s.neuron));
}

// Exact and table-based contributions, one row per text, at the calibration anchor.
struct CorpusFit {
  std::vector<std::string> labels;
  Mat<double> truth;   // texts x neurons
  Mat<double> approx;  // texts x neurons
};

template <typename T, typename Scalar>
CorpusFit corpus_fit(const Folded<Scalar>& m, const BasicContributionTable<T>& table, const Calibration<Scalar>& cal,
                     const Corpus& corpus, std::span<const Index> neurons, int workers = 1) {
  if (corpus.sequences.empty()) fail(ErrorCode::EmptyCorpus, "corpus fit needs texts");
  for (Index j : neurons) {
    detail::check_neuron(j, m.dims);
    if (j >= table.neurons()) fail(ErrorCode::NeuronOutOfRange, "neuron outside table");
  }
  const auto texts = static_cast<Index>(corpus.sequences.size());
  const auto cols = static_cast<Index>(neurons.size());
  CorpusFit fit{{}, Mat<double>(texts, cols), Mat<double>(texts, cols)};
  const Index grid[] = {cal.position};
  parallel_for(texts, workers, [&](Index k) {
    const auto& x = corpus.sequences[static_cast<std::size_t>(k)];
    if (x.size() < cal.position)
      fail(ErrorCode::TooShort, "text '" + x.label + "' is shorter than the anchor position");
    const Mat<double> truth = true_contributions(m, cal.heads, x.view(), grid, cal.token);
    const Eigen::VectorXd approx = approx_contributions(table, cal.median, x.view());
    for (Index c = 0; c < cols; ++c) {
      fit.truth(k, c) = truth(0, neurons[static_cast<std::size_t>(c)]);
      fit.approx(k, c) = approx(neurons[static_cast<std::size_t>(c)]);
    }
  });
  for (const auto& x : corpus.sequences) fit.labels.push_back(x.label);
  return fit;
}

struct TvEntry {
  Index head = 0;
  Index position = 0;
  double tv = 0;
};

// TV between the exact attention row and its factorized approximation for every
// position 1..len(x) (clipped to n_ctx) and every head in `heads`.
template <typename Scalar>
std::vector<TvEntry> tv_report(const Folded<Scalar>& m, const KeyGeometry<Scalar>& g, std::span<const TokenId> x,
                               const HeadSet& heads) {
  if (x.size() < 2) fail(ErrorCode::TooShort, "TV report needs at least two tokens");
  heads.validate(m.dims);
  const Index len = std::min<Index>(static_cast<Index>(x.size()), m.dims.n_ctx);
  const auto prefix = x.first(static_cast<std::size_t>(len));
  const auto proj = project(m, prefix);
  const Index dh = m.dims.d_head;
  const Scalar inv_sqrt_dh = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  std::vector<TvEntry> out;
  for (Index n = 1; n <= len; ++n) {
    for (Index h : heads.heads) {
      const auto cols = Eigen::seqN(h * dh, dh);
      const Vec<Scalar> scores = proj.key(Eigen::seqN(0, n), cols) * proj.query(n - 1, cols).transpose() * inv_sqrt_dh;
      const Vec<Scalar> exact = softmax(scores);
      const Vec<Scalar> approx = attn_approx_row(m, g, h, n, prefix);
      out.push_back({h, n, tv_distance(exact, approx)});
    }
  }
  return out;
}

// Both sides of the OV error inequality at (h, n, j) for a given TV.
struct OvBound {
  double exact = 0;   // Σ exact_i · v_i / ln_mlp
  double approx = 0;  // Σ approx_i · v_i / ln_mlp
  double tv = 0;
  double bound = 0;   // tv · (max v − min v) / ln_mlp
};

// v_i = VO^h(i, x_i) · W_in[:, j], value bias excluded.
template <typename Scalar>
Vec<Scalar> ov_readout(const Folded<Scalar>& m, const Projections<Scalar>& proj, Index h, Index n, Index j) {
  const Index dh = m.dims.d_head;
  const Vec<Scalar> readout = m.out_weight(h) * m.w_mlp_in.col(j);
  return proj.value(Eigen::seqN(0, n), Eigen::seqN(h * dh, dh)) * readout;
}

template <typename Scalar>
double ov_error_bound(const Folded<Scalar>& m, std::span<const TokenId> x, Index h, Index n, Index j, double tv) {
  if (!(tv >= 0 && tv <= 1)) fail(ErrorCode::ConfigError, "tv must lie in [0, 1]");
  detail::check_head(h, m.dims);
  detail::check_neuron(j, m.dims);
  detail::check_position(n, static_cast<Index>(x.size()), m.dims.n_ctx);
  const auto prefix = x.first(static_cast<std::size_t>(n));
  const auto proj = project(m, prefix);
  const Vec<Scalar> v = ov_readout(m, proj, h, n, j);
  const double ln = static_cast<double>(probe_position(m, proj, prefix, n).ln_mlp_scale);
  return tv * static_cast<double>(v.maxCoeff() - v.minCoeff()) / ln;
}

template <typename Scalar>
OvBound ov_bound_check(const Folded<Scalar>& m, const KeyGeometry<Scalar>& g, std::span<const TokenId> x,
                       Index h, Index n, Index j) {
  detail::check_head(h, m.dims);
  detail::check_neuron(j, m.dims);
  detail::check_position(n, static_cast<Index>(x.size()), m.dims.n_ctx);
  const auto prefix = x.first(static_cast<std::size_t>(n));
  const auto proj = project(m, prefix);
  const auto probe = probe_position(m, proj, prefix, n);
  const Vec<Scalar> v = ov_readout(m, proj, h, n, j);
  const Vec<Scalar>& exact = probe.attn[static_cast<std::size_t>(h)];
  const Vec<Scalar> approx = attn_approx_row(m, g, h, n, prefix);
  const double ln = static_cast<double>(probe.ln_mlp_scale);
  OvBound b;
  b.exact = static_cast<double>(exact.dot(v)) / ln;
  b.approx = static_cast<double>(approx.dot(v)) / ln;
  b.tv = tv_distance(exact, approx);
  b.bound = b.tv * static_cast<double>(v.maxCoeff() - v.minCoeff()) / ln;
  return b;
}

double median(std::vector<double> values);

}  // namespace circuit_lens
