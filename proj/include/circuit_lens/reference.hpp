#pragma once

#include <optional>
#include <span>
#include <vector>

#include "circuit_lens/checkpoint.hpp"
#include "circuit_lens/numerics.hpp"

namespace circuit_lens {

// Positions are 1-based throughout: position n attends over 1..n and reads
// positional embedding row n-1.

namespace detail {

inline void check_position(Index n, Index length, Index n_ctx) {
  if (n < 1 || n > length || n > n_ctx)
    fail(ErrorCode::PositionOutOfRange, "position " + std::to_string(n) + " outside [1, " +
                                            std::to_string(std::min(length, n_ctx)) + "]");
}

inline void check_head(Index h, const Dims& d) {
  if (h < 0 || h >= d.n_heads)
    fail(ErrorCode::HeadOutOfRange, "head " + std::to_string(h) + " outside [0, " +
                                        std::to_string(d.n_heads) + ")");
}

inline void check_neuron(Index j, const Dims& d) {
  if (j < 0 || j >= d.d_mlp)
    fail(ErrorCode::NeuronOutOfRange, "neuron " + std::to_string(j) + " outside [0, " +
                                          std::to_string(d.d_mlp) + ")");
}

inline void check_token(TokenId t, const Dims& d) {
  if (t < 0 || t >= d.d_voc)
    fail(ErrorCode::IdOutOfRange, "token " + std::to_string(t) + " outside [0, " +
                                      std::to_string(d.d_voc) + ")");
}

inline void check_tokens(std::span<const TokenId> tokens, const Dims& d) {
  for (TokenId t : tokens) check_token(t, d);
}

}  // namespace detail

// LayerNorm-1 output of (token at position n): the unit-free residual direction.
template <typename Scalar>
RowVec<Scalar> normalized_residual(const Folded<Scalar>& m, TokenId token, Index n) {
  return layer_norm_direction(m.token_embed.row(token) + m.pos_embed.row(n - 1));
}

// Per-position projections of a token prefix. Queries and keys carry their
// biases; values are stored without the value bias.
template <typename Scalar>
struct Projections {
  Mat<Scalar> normed;  // length x d_model
  Mat<Scalar> query, key, value;
};

template <typename Scalar>
Projections<Scalar> project(const Folded<Scalar>& m, std::span<const TokenId> tokens) {
  const Index len = static_cast<Index>(tokens.size());
  if (len > m.dims.n_ctx) detail::check_position(len, len, m.dims.n_ctx);
  detail::check_tokens(tokens, m.dims);
  Projections<Scalar> p;
  p.normed.resize(len, m.dims.d_model);
  for (Index i = 0; i < len; ++i) p.normed.row(i) = normalized_residual(m, tokens[i], i + 1);
  p.query = (p.normed * m.w_query).rowwise() + m.b_query.transpose();
  p.key = (p.normed * m.w_key).rowwise() + m.b_key.transpose();
  p.value = p.normed * m.w_value;
  return p;
}

// Exact layer-0 quantities at one attending position.
template <typename Scalar>
struct PositionProbe {
  Index position = 0;
  std::vector<Vec<Scalar>> attn;   // per head, length = position
  Mat<Scalar> head_ov;             // n_heads x d_model, value bias excluded
  RowVec<Scalar> residual_post;    // residual entering LayerNorm-2
  Scalar ln_mlp_scale = 0;         // RMS of the centered residual_post
};

// Runs attention at position n over a projected prefix; when `substitute` is
// set, the token at n is replaced before its query, key and value are formed.
template <typename Scalar>
PositionProbe<Scalar> probe_position(const Folded<Scalar>& m, const Projections<Scalar>& proj,
                                     std::span<const TokenId> tokens, Index n,
                                     std::optional<TokenId> substitute = std::nullopt) {
  const Dims& d = m.dims;
  detail::check_position(n, std::min<Index>(proj.normed.rows(), tokens.size()), d.n_ctx);
  const TokenId t_n = substitute.value_or(tokens[n - 1]);
  detail::check_token(t_n, d);

  RowVec<Scalar> normed_n = normalized_residual(m, t_n, n);
  RowVec<Scalar> q_n = normed_n * m.w_query + m.b_query.transpose();
  Mat<Scalar> keys = proj.key.topRows(n);
  Mat<Scalar> values = proj.value.topRows(n);
  if (substitute) {
    keys.row(n - 1) = normed_n * m.w_key + m.b_key.transpose();
    values.row(n - 1) = normed_n * m.w_value;
  }

  PositionProbe<Scalar> probe;
  probe.position = n;
  probe.head_ov.resize(d.n_heads, d.d_model);
  const Scalar inv_sqrt_dh = Scalar(1) / std::sqrt(static_cast<Scalar>(d.d_head));
  RowVec<Scalar> post = m.token_embed.row(t_n) + m.pos_embed.row(n - 1);
  for (Index h = 0; h < d.n_heads; ++h) {
    const auto cols = Eigen::seqN(h * d.d_head, d.d_head);
    Vec<Scalar> scores = keys(Eigen::all, cols) * q_n(cols).transpose() * inv_sqrt_dh;
    Vec<Scalar> row = softmax(scores);
    RowVec<Scalar> mixed = row.transpose() * values(Eigen::all, cols);
    probe.head_ov.row(h) = mixed * m.out_weight(h);
    post += probe.head_ov.row(h) + m.value_bias(h).transpose() * m.out_weight(h);
    probe.attn.push_back(std::move(row));
  }
  post += m.b_out.transpose();
  probe.residual_post = post;
  RowVec<Scalar> centered = post.array() - post.mean();
  probe.ln_mlp_scale = centered.norm() / std::sqrt(static_cast<Scalar>(d.d_model));
  return probe;
}

template <typename Scalar>
PositionProbe<Scalar> probe_sequence(const Folded<Scalar>& m, std::span<const TokenId> tokens,
                                     Index n, std::optional<TokenId> substitute = std::nullopt) {
  detail::check_position(n, static_cast<Index>(tokens.size()), m.dims.n_ctx);
  const auto prefix = tokens.first(static_cast<std::size_t>(n));
  return probe_position(m, project(m, prefix), prefix, n, substitute);
}

template <typename Scalar>
Vec<Scalar> exact_attention_row(const Folded<Scalar>& m, std::span<const TokenId> tokens, Index h,
                                Index n) {
  detail::check_head(h, m.dims);
  return probe_sequence(m, tokens, n).attn[static_cast<std::size_t>(h)];
}

template <typename Scalar>
Scalar ln_mlp_scale(const Folded<Scalar>& m, std::span<const TokenId> tokens, Index n) {
  return probe_sequence(m, tokens, n).ln_mlp_scale;
}

// Combined OV output of `heads`, divided by the LayerNorm-2 scale, read by every
// MLP neuron. Value biases are excluded; the MLP input bias is not added.
template <typename Scalar>
Vec<Scalar> heads_ov_contributions(const Folded<Scalar>& m, const PositionProbe<Scalar>& probe,
                                   std::span<const Index> heads) {
  RowVec<Scalar> combined = RowVec<Scalar>::Zero(m.dims.d_model);
  for (Index h : heads) {
    detail::check_head(h, m.dims);
    combined += probe.head_ov.row(h);
  }
  return ((combined / probe.ln_mlp_scale) * m.w_mlp_in).transpose();
}

template <typename Scalar>
Scalar heads_ov_contribution(const Folded<Scalar>& m, std::span<const TokenId> tokens, Index n,
                             std::span<const Index> heads, Index j) {
  detail::check_neuron(j, m.dims);
  const auto probe = probe_sequence(m, tokens, n);
  RowVec<Scalar> combined = RowVec<Scalar>::Zero(m.dims.d_model);
  for (Index h : heads) {
    detail::check_head(h, m.dims);
    combined += probe.head_ov.row(h);
  }
  return combined.dot(m.w_mlp_in.col(j).transpose()) / probe.ln_mlp_scale;
}

// Full MLP pre-activation at position n, including the folded input bias.
template <typename Scalar>
Vec<Scalar> mlp_preactivation(const Folded<Scalar>& m, const PositionProbe<Scalar>& probe) {
  RowVec<Scalar> centered = probe.residual_post.array() - probe.residual_post.mean();
  return ((centered / probe.ln_mlp_scale) * m.w_mlp_in).transpose() + m.b_mlp_in;
}

// Whole-sequence forward pass.
template <typename Scalar>
struct LayerOneState {
  Mat<Scalar> residual;  // length x d_model, token + position embedding
  Projections<Scalar> proj;
  std::vector<Mat<Scalar>> attn;      // per head, length x length, lower triangular
  std::vector<Mat<Scalar>> head_out;  // per head, length x d_model, value bias included
  Vec<Scalar> ln_mlp_scale;
  Mat<Scalar> mlp_pre;  // length x d_mlp
};

template <typename Scalar>
LayerOneState<Scalar> run_layer_one(const Folded<Scalar>& m, std::span<const TokenId> tokens) {
  const Dims& d = m.dims;
  const Index len = static_cast<Index>(tokens.size());
  LayerOneState<Scalar> s;
  s.proj = project(m, tokens);
  s.residual.resize(len, d.d_model);
  for (Index i = 0; i < len; ++i) s.residual.row(i) = m.token_embed.row(tokens[i]) + m.pos_embed.row(i);
  s.attn.assign(static_cast<std::size_t>(d.n_heads), Mat<Scalar>::Zero(len, len));
  s.head_out.assign(static_cast<std::size_t>(d.n_heads), Mat<Scalar>::Zero(len, d.d_model));
  s.ln_mlp_scale.resize(len);
  s.mlp_pre.resize(len, d.d_mlp);
  for (Index n = 1; n <= len; ++n) {
    const auto probe = probe_position(m, s.proj, tokens, n);
    for (Index h = 0; h < d.n_heads; ++h) {
      const auto hs = static_cast<std::size_t>(h);
      s.attn[hs].row(n - 1).head(n) = probe.attn[hs].transpose();
      s.head_out[hs].row(n - 1) = probe.head_ov.row(h) + m.value_bias(h).transpose() * m.out_weight(h);
    }
    s.ln_mlp_scale(n - 1) = probe.ln_mlp_scale;
    s.mlp_pre.row(n - 1) = mlp_preactivation(m, probe).transpose();
  }
  return s;
}

// Straight-line layer-0 forward on unfolded weights with explicit LayerNorm
// (√d-normalized, gain and bias applied after). Shares no code with the folded path.
struct ExplicitForward {
  std::vector<Eigen::MatrixXd> attn;  // per head, length x length
  Eigen::MatrixXd mlp_pre;            // length x d_mlp
};

ExplicitForward explicit_layer_norm_forward(const RawCheckpoint& raw, std::span<const TokenId> tokens,
                                            bool center_embeddings);

}  // namespace circuit_lens
