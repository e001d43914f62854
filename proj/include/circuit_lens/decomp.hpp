#pragma once

#include <span>
#include <string_view>

#include "circuit_lens/checkpoint.hpp"
#include "circuit_lens/numerics.hpp"
#include "circuit_lens/reference.hpp"

namespace circuit_lens {

// Midpoint of the range of token-embedding norms; stands in for ‖W_E[t]‖ in
// the positional part of the key.
struct NormConstant {
  double value = 0;
  double min_norm = 0;
  double max_norm = 0;
};

template <typename Scalar>
NormConstant compute_c(const Folded<Scalar>& m) {
  const Vec<Scalar> norms = m.token_embed.rowwise().norm();
  NormConstant c;
  c.min_norm = static_cast<double>(norms.minCoeff());
  c.max_norm = static_cast<double>(norms.maxCoeff());
  c.value = 0.5 * (c.min_norm + c.max_norm);
  return c;
}

// Approximate key for (head h, attending position n, key position i, token t_i)
// split into a content part (depends on i only through t_i) and a positional part.
// Key biases are left out; they add a constant to every score in a row.
template <typename Scalar>
struct KeyParts {
  Vec<Scalar> content;
  Vec<Scalar> position;
};

template <typename Scalar>
KeyParts<Scalar> key_parts(const Folded<Scalar>& m, const NormConstant& c, Index h, Index n,
                           Index i, TokenId t_i) {
  const Dims& d = m.dims;
  detail::check_head(h, d);
  detail::check_token(t_i, d);
  detail::check_position(n, d.n_ctx, d.n_ctx);
  if (i < 1 || i > n)
    fail(ErrorCode::PositionOutOfRange, "key position " + std::to_string(i) + " outside [1, " +
                                            std::to_string(n) + "]");
  const Scalar sqrt_d = std::sqrt(static_cast<Scalar>(d.d_model));
  const RowVec<Scalar> x = m.token_embed.row(t_i) + m.pos_embed.row(n - 1);
  const RowVec<Scalar> dp = m.pos_embed.row(i - 1) - m.pos_embed.row(n - 1);
  const Scalar pos_norm = std::sqrt(m.pos_embed.row(i - 1).squaredNorm() +
                                    static_cast<Scalar>(c.value * c.value));
  KeyParts<Scalar> parts;
  parts.content = (sqrt_d / x.norm() * x * m.key_weight(h)).transpose();
  parts.position = (sqrt_d / pos_norm * dp * m.key_weight(h)).transpose();
  return parts;
}

// Exact folded query of head h for token t at position n, bias included.
template <typename Scalar>
Vec<Scalar> query(const Folded<Scalar>& m, Index h, Index n, TokenId t) {
  detail::check_head(h, m.dims);
  detail::check_token(t, m.dims);
  detail::check_position(n, m.dims.n_ctx, m.dims.n_ctx);
  return (normalized_residual(m, t, n) * m.query_weight(h) + m.query_bias(h).transpose()).transpose();
}

// Model-wide precomputation shared by every kernel and content evaluation.
template <typename Scalar>
struct KeyGeometry {
  NormConstant c;
  Mat<Scalar> pos_keys;        // n_ctx x (n_heads*d_head): pos_embed * w_key
  Vec<Scalar> pos_scale;       // √d_model / √(‖W_pos[i]‖² + C²)
  Vec<Scalar> token_norm_sq;   // ‖W_E[t]‖²
};

template <typename Scalar>
KeyGeometry<Scalar> key_geometry(const Folded<Scalar>& m, const NormConstant& c) {
  KeyGeometry<Scalar> g;
  g.c = c;
  g.pos_keys = m.pos_embed * m.w_key;
  const auto c2 = static_cast<Scalar>(c.value * c.value);
  const Scalar sqrt_d = std::sqrt(static_cast<Scalar>(m.dims.d_model));
  g.pos_scale = sqrt_d * (m.pos_embed.rowwise().squaredNorm().array() + c2).rsqrt().matrix();
  g.token_norm_sq = m.token_embed.rowwise().squaredNorm();
  return g;
}

template <typename Scalar>
KeyGeometry<Scalar> key_geometry(const Folded<Scalar>& m) {
  return key_geometry(m, compute_c(m));
}

template <typename Scalar>
struct PositionalKernel {
  Index head = 0;
  Index position = 0;  // attending position n
  TokenId token = 0;   // attending token t_n
  Vec<Scalar> weights;  // over key positions 1..n
};

// Log of the positional kernel: log-softmax of query · P[n, i] / √d_head.
template <typename Scalar>
Vec<Scalar> positional_log_kernel(const Folded<Scalar>& m, const KeyGeometry<Scalar>& g, Index h,
                                  Index n, const Vec<Scalar>& q) {
  const Index dh = m.dims.d_head;
  const auto cols = Eigen::seqN(h * dh, dh);
  const Vec<Scalar> pk = g.pos_keys(Eigen::seqN(0, n), cols) * q;  // W_pos[i] W_K q
  Vec<Scalar> scores = (pk.array() - pk(n - 1)) * g.pos_scale.head(n).array() /
                       std::sqrt(static_cast<Scalar>(dh));
  scores.array() -= log_sum_exp(scores);
  return scores;
}

template <typename Scalar>
PositionalKernel<Scalar> positional_kernel(const Folded<Scalar>& m, const KeyGeometry<Scalar>& g,
                                           Index h, Index n, TokenId t_n) {
  const Vec<Scalar> q = query(m, h, n, t_n);
  PositionalKernel<Scalar> k{h, n, t_n, positional_log_kernel(m, g, h, n, q).array().exp().matrix()};
  k.weights /= k.weights.sum();
  return k;
}

// log content factor: query(n, t_n) · E[n, t_i] / √d_head, through key_parts.
template <typename Scalar>
Scalar log_content_factor(const Folded<Scalar>& m, const NormConstant& c, Index h, Index n,
                          TokenId t_i, TokenId t_n) {
  const Vec<Scalar> q = query(m, h, n, t_n);
  const auto parts = key_parts(m, c, h, n, n, t_i);
  return q.dot(parts.content) / std::sqrt(static_cast<Scalar>(m.dims.d_head));
}

template <typename Scalar>
Scalar content_factor(const Folded<Scalar>& m, const NormConstant& c, Index h, Index n, TokenId t_i,
                      TokenId t_n) {
  const Scalar f = std::exp(log_content_factor(m, c, h, n, t_i, t_n));
  if (!std::isfinite(f)) fail(ErrorCode::NonFinite, "content factor overflow");
  return f;
}

// Bulk log content factors for a fixed query: scores E[n, t]·q/√d_head for each
// token in `tokens`, using ‖W_E[t] + W_pos[n]‖² = ‖W_E[t]‖² + 2 W_E[t]·W_pos[n] + ‖W_pos[n]‖².
template <typename Scalar>
Vec<Scalar> log_content_factors(const Folded<Scalar>& m, const KeyGeometry<Scalar>& g, Index h,
                                Index n, const Vec<Scalar>& q, std::span<const TokenId> tokens) {
  const Vec<Scalar> u = m.key_weight(h) * q;
  const auto wp = m.pos_embed.row(n - 1);
  const Scalar wp_u = wp.dot(u.transpose());
  const Scalar wp_sq = wp.squaredNorm();
  const Scalar scale = std::sqrt(static_cast<Scalar>(m.dims.d_model) / m.dims.d_head);
  Vec<Scalar> out(static_cast<Index>(tokens.size()));
  for (Index k = 0; k < out.size(); ++k) {
    const auto e = m.token_embed.row(tokens[static_cast<std::size_t>(k)]);
    const Scalar norm_sq = g.token_norm_sq(tokens[static_cast<std::size_t>(k)]) +
                           2 * e.dot(wp) + wp_sq;
    out(k) = scale * (e.dot(u.transpose()) + wp_u) / std::sqrt(norm_sq);
  }
  return out;
}

// Same as above for every token in the vocabulary, as two matrix-vector products.
template <typename Scalar>
Vec<Scalar> log_content_factors_vocab(const Folded<Scalar>& m, const KeyGeometry<Scalar>& g,
                                      Index h, Index n, const Vec<Scalar>& q) {
  const Vec<Scalar> u = m.key_weight(h) * q;
  const Vec<Scalar> wp = m.pos_embed.row(n - 1).transpose();
  Mat<Scalar> probes(m.dims.d_model, 2);
  probes << u, wp;
  const Mat<Scalar> dots = m.token_embed * probes;
  const Scalar scale = std::sqrt(static_cast<Scalar>(m.dims.d_model) / m.dims.d_head);
  const auto norm = (g.token_norm_sq.array() + 2 * dots.col(1).array() + wp.squaredNorm()).sqrt();
  return (scale * (dots.col(0).array() + wp.dot(u)) / norm).matrix();
}

// Factorized approximate attention: pos_i · content_{x_i} / Σ_j pos_j · content_{x_j},
// combined in log space.
template <typename Scalar>
Vec<Scalar> attn_approx_row(const Folded<Scalar>& m, const KeyGeometry<Scalar>& g, Index h,
                            Index n, std::span<const TokenId> tokens) {
  detail::check_head(h, m.dims);
  detail::check_position(n, static_cast<Index>(tokens.size()), m.dims.n_ctx);
  detail::check_tokens(tokens.first(static_cast<std::size_t>(n)), m.dims);
  const Vec<Scalar> q = query(m, h, n, tokens[static_cast<std::size_t>(n - 1)]);
  const Vec<Scalar> log_pos = positional_log_kernel(m, g, h, n, q);
  const Vec<Scalar> log_content =
      log_content_factors(m, g, h, n, q, tokens.first(static_cast<std::size_t>(n)));
  return softmax(log_pos + log_content);
}

// Direct softmax of query · (E + P) / √d_head, building every approximate key.
template <typename Scalar>
Vec<Scalar> attn_approx_row_direct(const Folded<Scalar>& m, const NormConstant& c, Index h, Index n,
                                   std::span<const TokenId> tokens) {
  detail::check_position(n, static_cast<Index>(tokens.size()), m.dims.n_ctx);
  const Vec<Scalar> q = query(m, h, n, tokens[static_cast<std::size_t>(n - 1)]);
  Vec<Scalar> scores(n);
  for (Index i = 1; i <= n; ++i) {
    const auto parts = key_parts(m, c, h, n, i, tokens[static_cast<std::size_t>(i - 1)]);
    scores(i - 1) = q.dot(parts.content + parts.position) / std::sqrt(static_cast<Scalar>(m.dims.d_head));
  }
  return softmax(scores);
}

template <typename DerivedP, typename DerivedQ>
double tv_distance(const Eigen::MatrixBase<DerivedP>& p, const Eigen::MatrixBase<DerivedQ>& q) {
  if (p.size() != q.size())
    fail(ErrorCode::LengthMismatch, "TV of vectors with lengths " + std::to_string(p.size()) +
                                        " and " + std::to_string(q.size()));
  constexpr double kTol = 1e-6;
  if (std::abs(static_cast<double>(p.sum()) - 1) > kTol || std::abs(static_cast<double>(q.sum()) - 1) > kTol)
    fail(ErrorCode::NotNormalized, "TV inputs must each sum to 1");
  return 0.5 * static_cast<double>((p - q).cwiseAbs().sum());
}

enum class KernelKind { SlowlyDecaying, Local, Uniform };

std::string_view kernel_kind_name(KernelKind kind);

struct KernelClass {
  KernelKind kind = KernelKind::SlowlyDecaying;
  double participation_ratio = 0;  // 1 / Σ pos_i²
  double tail_mass = 0;            // mass on the last `tail_window` positions
};

struct KernelRule {
  Index tail_window = 50;
  double uniform_fraction = 0.8;  // uniform if PR > fraction * n
  double local_mass = 0.9;        // local if tail mass > this
  Index min_context = 50;
};

template <typename Scalar>
KernelClass classify_kernel(const PositionalKernel<Scalar>& k, const KernelRule& rule = {}) {
  const Index n = k.weights.size();
  if (n < rule.min_context)
    fail(ErrorCode::ContextTooShort, "kernel classification needs at least " +
                                         std::to_string(rule.min_context) + " positions");
  KernelClass out;
  out.participation_ratio = 1.0 / static_cast<double>(k.weights.squaredNorm());
  out.tail_mass = static_cast<double>(k.weights.tail(std::min(rule.tail_window, n)).sum());
  if (out.participation_ratio > rule.uniform_fraction * static_cast<double>(n))
    out.kind = KernelKind::Uniform;
  else if (out.tail_mass > rule.local_mass)
    out.kind = KernelKind::Local;
  else
    out.kind = KernelKind::SlowlyDecaying;
  return out;
}

// TV between two kernels aligned by distance from their attending positions.
// The longer kernel is truncated to the shorter window and renormalized.
template <typename Scalar>
double kernel_shift_tv(const PositionalKernel<Scalar>& a, const PositionalKernel<Scalar>& b) {
  const Index w = std::min(a.weights.size(), b.weights.size());
  Vec<Scalar> ta = a.weights.tail(w), tb = b.weights.tail(w);
  ta /= ta.sum();
  tb /= tb.sum();
  return tv_distance(ta, tb);
}

// Largest |cos(W_E[t], W_pos[i])| over every `token_stride`-th token and all positions.
template <typename Scalar>
double max_embedding_cosine(const Folded<Scalar>& m, Index token_stride = 1) {
  const Index count = (m.dims.d_voc + token_stride - 1) / token_stride;
  Mat<Scalar> tokens(count, m.dims.d_model);
  for (Index k = 0; k < count; ++k) tokens.row(k) = m.token_embed.row(k * token_stride).normalized();
  const Mat<Scalar> pos = m.pos_embed.rowwise().normalized();
  return static_cast<double>((tokens * pos.transpose()).cwiseAbs().maxCoeff());
}

}  // namespace circuit_lens
