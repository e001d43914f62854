#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "circuit_lens/checkpoint.hpp"

namespace circuit_lens::testing {

inline Dims toy_dims() { return Dims{16, 40, 64, 4, 4, 24}; }

// Random layer-0 checkpoint with non-trivial LayerNorm gains and biases.
inline RawCheckpoint make_toy_raw(const Dims& d, std::uint64_t seed, double embed_scale = 1.0) {
  using namespace tensor_names;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random = [&](Index rows, Index cols, double scale) {
    Eigen::MatrixXd m(rows, cols);
    for (Index c = 0; c < cols; ++c)
      for (Index r = 0; r < rows; ++r) m(r, c) = scale * normal(rng);
    return m;
  };
  const Index hd = d.n_heads * d.d_head;
  const double w_scale = 1.0 / std::sqrt(static_cast<double>(d.d_model));
  RawCheckpoint raw;
  raw.dims = d;
  raw.tensors[kTokenEmbedding] = random(d.d_voc, d.d_model, embed_scale);
  raw.tensors[kPosEmbedding] = random(d.n_ctx, d.d_model, 0.5 * embed_scale);
  raw.tensors[kLn1Weight] = (Eigen::MatrixXd::Ones(d.d_model, 1) + random(d.d_model, 1, 0.2));
  raw.tensors[kLn1Bias] = random(d.d_model, 1, 0.1);
  raw.tensors[kQWeight] = random(d.d_model, hd, w_scale);
  raw.tensors[kKWeight] = random(d.d_model, hd, w_scale);
  raw.tensors[kVWeight] = random(d.d_model, hd, w_scale);
  raw.tensors[kQBias] = random(hd, 1, 0.1);
  raw.tensors[kKBias] = random(hd, 1, 0.1);
  raw.tensors[kVBias] = random(hd, 1, 0.1);
  raw.tensors[kAttnOutWeight] = random(hd, d.d_model, 1.0 / std::sqrt(static_cast<double>(hd)));
  raw.tensors[kAttnOutBias] = random(d.d_model, 1, 0.1);
  raw.tensors[kLn2Weight] = (Eigen::MatrixXd::Ones(d.d_model, 1) + random(d.d_model, 1, 0.2));
  raw.tensors[kLn2Bias] = random(d.d_model, 1, 0.1);
  raw.tensors[kMlpInWeight] = random(d.d_model, d.d_mlp, w_scale);
  raw.tensors[kMlpInBias] = random(d.d_mlp, 1, 0.1);
  return raw;
}

// Canonical-name container tensors: 2-D row-major, bias and gain vectors 1-D.
inline std::map<std::string, TensorData> to_container(const RawCheckpoint& raw) {
  std::map<std::string, TensorData> out;
  for (const auto& [name, m] : raw.tensors) {
    TensorData t;
    if (m.cols() == 1) {
      t.shape = {m.rows()};
    } else {
      t.shape = {m.rows(), m.cols()};
    }
    const RowMat<double> rm = m;
    t.values.assign(rm.data(), rm.data() + rm.size());
    out[name] = std::move(t);
  }
  return out;
}

inline std::vector<TokenId> random_tokens(Index length, Index d_voc, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(d_voc - 1));
  std::vector<TokenId> ids(static_cast<std::size_t>(length));
  for (auto& t : ids) t = pick(rng);
  return ids;
}

}  // namespace circuit_lens::testing
