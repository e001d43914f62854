#pragma once

#include <algorithm>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "circuit_lens/parallel.hpp"
#include "circuit_lens/stability.hpp"

namespace circuit_lens {

struct HeadSet {
  std::vector<Index> heads;

  // The six slowly-decaying layer-0 heads of GPT-2 Small.
  static HeadSet gpt2_slow_heads() { return HeadSet{{0, 2, 6, 8, 9, 10}}; }
  // Comma-separated list, e.g. "0,2,6". Duplicates are rejected.
  static HeadSet parse(const std::string& text);

  void validate(const Dims& d) const;
  std::string to_string() const;
  std::span<const Index> view() const { return heads; }
};

// Heads whose kernel at (n, t_n) does not classify as slowly-decaying.
template <typename Scalar>
std::vector<Index> heads_not_slowly_decaying(const Folded<Scalar>& m, const KeyGeometry<Scalar>& g,
                                             const HeadSet& set, Index n, TokenId t_n) {
  std::vector<Index> out;
  if (n < KernelRule{}.min_context) return out;
  for (Index h : set.heads)
    if (classify_kernel(positional_kernel(m, g, h, n, t_n)).kind != KernelKind::SlowlyDecaying)
      out.push_back(h);
  return out;
}

// √d (W_E[t] + W_pos[n]) / ‖W_E[t] + W_pos[n]‖ : the value-side input with the
// key position pinned to the attending position.
template <typename Scalar>
RowVec<Scalar> anchored_direction(const Folded<Scalar>& m, TokenId t, Index n) {
  const RowVec<Scalar> x = m.token_embed.row(t) + m.pos_embed.row(n - 1);
  return std::sqrt(static_cast<Scalar>(m.dims.d_model)) / x.norm() * x;
}

// VO^h(n, t) · W_in[:, j]; value and output biases excluded.
template <typename Scalar>
Scalar vo_dot(const Folded<Scalar>& m, Index h, Index n, TokenId t, Index j) {
  detail::check_head(h, m.dims);
  detail::check_token(t, m.dims);
  detail::check_neuron(j, m.dims);
  detail::check_position(n, m.dims.n_ctx, m.dims.n_ctx);
  const RowVec<Scalar> ov = anchored_direction(m, t, n) * m.value_weight(h) * m.out_weight(h);
  return ov.dot(m.w_mlp_in.col(j).transpose());
}

// Elementwise median across kernels, renormalized to sum to 1.
template <typename Scalar>
PositionalKernel<Scalar> median_kernel(std::span<const PositionalKernel<Scalar>> kernels) {
  if (kernels.empty()) fail(ErrorCode::MixedAnchors, "median of an empty kernel list");
  const auto& first = kernels.front();
  for (const auto& k : kernels)
    if (k.position != first.position || k.token != first.token || k.weights.size() != first.weights.size())
      fail(ErrorCode::MixedAnchors, "kernels anchored at different (position, token) pairs");
  PositionalKernel<Scalar> out{-1, first.position, first.token, Vec<Scalar>(first.weights.size())};
  std::vector<Scalar> column(kernels.size());
  const std::size_t mid = column.size() / 2;
  for (Index i = 0; i < out.weights.size(); ++i) {
    for (std::size_t k = 0; k < kernels.size(); ++k) column[k] = kernels[k].weights(i);
    std::sort(column.begin(), column.end());
    out.weights(i) = column.size() % 2 ? column[mid] : (column[mid - 1] + column[mid]) / 2;
  }
  out.weights /= out.weights.sum();
  return out;
}

template <typename Scalar>
PositionalKernel<Scalar> median_kernel_at(const Folded<Scalar>& m, const KeyGeometry<Scalar>& g,
                                          const HeadSet& set, Index n, TokenId t_n) {
  if (set.heads.empty()) {
    PositionalKernel<Scalar> uniform{-1, n, t_n, Vec<Scalar>::Constant(n, Scalar(1) / n)};
    return uniform;
  }
  std::vector<PositionalKernel<Scalar>> kernels;
  for (Index h : set.heads) kernels.push_back(positional_kernel(m, g, h, n, t_n));
  return median_kernel<Scalar>(kernels);
}

// Normalizers sampled from one calibration text at the anchor.
template <typename Scalar>
struct Calibration {
  TokenSeq text;
  Index position = 0;
  TokenId token = 0;
  HeadSet heads;
  std::vector<double> denominators;  // one per head in `heads`
  double ln_mlp = 0;
  PositionalKernel<Scalar> median;
  std::optional<double> stop_word_density;
  std::string digest;
};

struct CalibrationOptions {
  // ln_mlp is averaged over this many anchor positions n, n - stride, ...
  Index ln_mlp_samples = 1;
  Index ln_mlp_stride = 8;
};

template <typename Scalar>
Calibration<Scalar> calibrate(const Folded<Scalar>& m, const KeyGeometry<Scalar>& g,
                              const HeadSet& set, const TokenSeq& y, Index n, TokenId t_n,
                              const CalibrationOptions& options = {}) {
  set.validate(m.dims);
  if (y.size() < n)
    fail(ErrorCode::TooShort, "calibration text has " + std::to_string(y.size()) +
                                  " tokens, anchor needs " + std::to_string(n));
  detail::check_position(n, y.size(), m.dims.n_ctx);
  detail::check_tokens(y.view(), m.dims);
  Calibration<Scalar> cal;
  cal.text = y;
  cal.position = n;
  cal.token = t_n;
  cal.heads = set;
  for (Index h : set.heads) cal.denominators.push_back(denom(m, g, h, n, t_n, y.view()).value);

  const Index samples = std::max<Index>(1, options.ln_mlp_samples);
  const auto proj = project(m, y.view().first(static_cast<std::size_t>(n)));
  double ln_sum = 0;
  Index used = 0;
  for (Index s = 0; s < samples; ++s) {
    const Index p = n - s * options.ln_mlp_stride;
    if (p < 1) break;
    ln_sum += static_cast<double>(probe_position(m, proj, y.view(), p, t_n).ln_mlp_scale);
    ++used;
  }
  cal.ln_mlp = ln_sum / static_cast<double>(used);
  cal.median = median_kernel_at(m, g, set, n, t_n);
  return cal;
}

struct TableProvenance {
  Index position = 0;
  TokenId token = 0;
  std::vector<Index> heads;
  std::string calibration_digest;
};

// contribution[j, t] for every MLP neuron j and vocabulary token t.
template <typename T>
struct BasicContributionTable {
  RowMat<T> values;  // d_mlp x d_voc
  TableProvenance provenance;

  Index neurons() const { return values.rows(); }
  Index vocab() const { return values.cols(); }
};

// Stored tables are 32-bit; a 64-bit table is available for exactness checks.
using ContributionTable = BasicContributionTable<float>;

inline constexpr Index kTableBlock = 512;

// contribution[j, t] = Σ_{h∈H} content^h(t) · VO^h(n, t)·W_in[:, j] / (ln_mlp · denom_h).
// Computed per fixed vocabulary block with 64-bit accumulation; blocks are
// independent, so the table does not depend on `workers`.
template <typename Out = float, typename Scalar>
BasicContributionTable<Out> contribution_table(const Folded<Scalar>& m, const KeyGeometry<Scalar>& g,
                                               const Calibration<Scalar>& cal, int workers = 1) {
  const Dims& d = m.dims;
  const auto& heads = cal.heads.heads;
  BasicContributionTable<Out> table;
  table.provenance = {cal.position, cal.token, heads, cal.digest};
  table.values = RowMat<Out>::Zero(d.d_mlp, d.d_voc);
  if (heads.empty()) return table;
  if (cal.denominators.size() != heads.size())
    fail(ErrorCode::ConfigError, "calibration denominators do not match its head set");

  const Index n = cal.position;
  const Index nh = static_cast<Index>(heads.size());
  const Index dh = d.d_head;
  // Per-head log weights over the vocabulary: log content − log(ln_mlp · denom_h).
  Mat<double> log_weight(d.d_voc, nh);
  Mat<Scalar> value_proj(d.d_model, nh * dh);
  Mat<Scalar> readout(nh * dh, d.d_mlp);
  for (Index k = 0; k < nh; ++k) {
    const Index h = heads[static_cast<std::size_t>(k)];
    const Vec<Scalar> q = query(m, h, n, cal.token);
    log_weight.col(k) = log_content_factors_vocab(m, g, h, n, q).template cast<double>().array() -
                        std::log(cal.ln_mlp * cal.denominators[static_cast<std::size_t>(k)]);
    value_proj.middleCols(k * dh, dh) = m.value_weight(h);
    readout.middleRows(k * dh, dh) = m.out_weight(h) * m.w_mlp_in;
  }
  const Mat<double> weight = log_weight.array().exp().matrix();
  if (!weight.allFinite()) {
    for (Index k = 0; k < nh; ++k)
      for (Index t = 0; t < d.d_voc; ++t)
        if (!std::isfinite(weight(t, k)))
          fail(ErrorCode::NonFinite, "non-finite contribution weight at head " +
                                         std::to_string(heads[static_cast<std::size_t>(k)]) +
                                         ", token " + std::to_string(t));
  }
  const Mat<double> value_proj_d = value_proj.template cast<double>();
  const Mat<double> readout_d = readout.template cast<double>();

  const Index blocks = (d.d_voc + kTableBlock - 1) / kTableBlock;
  parallel_for(blocks, workers, [&](Index b) {
    const Index t0 = b * kTableBlock;
    const Index count = std::min(kTableBlock, d.d_voc - t0);
    Mat<double> dirs(count, d.d_model);
    for (Index r = 0; r < count; ++r)
      dirs.row(r) = anchored_direction(m, static_cast<TokenId>(t0 + r), n).template cast<double>();
    Mat<double> mixed = dirs * value_proj_d;  // count x (nh*dh)
    for (Index k = 0; k < nh; ++k)
      mixed.middleCols(k * dh, dh).array().colwise() *= weight.col(k).segment(t0, count).array();
    const Mat<double> block = mixed * readout_d;  // count x d_mlp
    table.values.middleCols(t0, count) = block.transpose().template cast<Out>();
  });
  return table;
}

// The substituted sequence y = (x_1 .. x_{n-1}, t_n).
inline std::vector<TokenId> substituted_prefix(std::span<const TokenId> x, Index n, TokenId t_n) {
  if (static_cast<Index>(x.size()) < n)
    fail(ErrorCode::TooShort, "sequence of " + std::to_string(x.size()) +
                                  " tokens is shorter than position " + std::to_string(n));
  std::vector<TokenId> y(x.begin(), x.begin() + n);
  y.back() = t_n;
  return y;
}

// Σ_i kernel_i · contribution[j, y_i] for every neuron j.
template <typename T, typename Scalar>
Eigen::VectorXd approx_contributions(const BasicContributionTable<T>& table,
                                     const PositionalKernel<Scalar>& kernel,
                                     std::span<const TokenId> x) {
  const Index n = kernel.position;
  const auto y = substituted_prefix(x, n, kernel.token);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(table.neurons());
  for (Index i = 0; i < n; ++i) {
    const TokenId t = y[static_cast<std::size_t>(i)];
    if (t < 0 || t >= table.vocab()) fail(ErrorCode::IdOutOfRange, "token outside table vocabulary");
    out += static_cast<double>(kernel.weights(i)) * table.values.col(t).template cast<double>();
  }
  return out;
}

template <typename T, typename Scalar>
double approx_contribution(const BasicContributionTable<T>& table, const Calibration<Scalar>& cal,
                           std::span<const TokenId> x, Index j) {
  if (j < 0 || j >= table.neurons())
    fail(ErrorCode::NeuronOutOfRange, "neuron " + std::to_string(j) + " outside table");
  const auto y = substituted_prefix(x, cal.position, cal.token);
  double acc = 0;
  for (Index i = 0; i < cal.position; ++i)
    acc += static_cast<double>(cal.median.weights(i)) *
           static_cast<double>(table.values(j, y[static_cast<std::size_t>(i)]));
  return acc;
}

// Binary table file: header + row-major little-endian float32 payload.
void write_table(const std::filesystem::path& path, const ContributionTable& table);
ContributionTable read_table(const std::filesystem::path& path);
TableProvenance read_table_header(const std::filesystem::path& path);

}  // namespace circuit_lens
