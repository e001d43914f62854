#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "circuit_lens/common.hpp"

namespace circuit_lens {

struct Dims {
  Index d_model = 0;
  Index d_voc = 0;
  Index n_ctx = 0;
  Index n_heads = 0;
  Index d_head = 0;
  Index d_mlp = 0;

  void validate() const;
  bool operator==(const Dims&) const = default;
};

// Canonical tensor names, all stored in input-by-output layout after loading.
namespace tensor_names {
inline constexpr const char* kTokenEmbedding = "token_embedding";
inline constexpr const char* kPosEmbedding = "pos_embedding";
inline constexpr const char* kLn1Weight = "h0.ln1_weight";
inline constexpr const char* kLn1Bias = "h0.ln1_bias";
inline constexpr const char* kQWeight = "h0.q_weight";
inline constexpr const char* kKWeight = "h0.k_weight";
inline constexpr const char* kVWeight = "h0.v_weight";
inline constexpr const char* kQBias = "h0.q_bias";
inline constexpr const char* kKBias = "h0.k_bias";
inline constexpr const char* kVBias = "h0.v_bias";
inline constexpr const char* kAttnOutWeight = "h0.attn_out_weight";
inline constexpr const char* kAttnOutBias = "h0.attn_out_bias";
inline constexpr const char* kLn2Weight = "h0.ln2_weight";
inline constexpr const char* kLn2Bias = "h0.ln2_bias";
inline constexpr const char* kMlpInWeight = "h0.mlp_in_weight";
inline constexpr const char* kMlpInBias = "h0.mlp_in_bias";
// Packed query/key/value, only meaningful in a name map.
inline constexpr const char* kQkvWeight = "h0.qkv_weight";
inline constexpr const char* kQkvBias = "h0.qkv_bias";
}  // namespace tensor_names

// Maps canonical names to container keys. Published GPT-2 checkpoints differ in
// naming, in whether q/k/v are packed, and in weight orientation.
struct NameMap {
  std::map<std::string, std::string> tensors;
  bool qkv_packed = true;
  std::array<char, 3> qkv_order{'q', 'k', 'v'};
  // true when 2-D weights are stored output-by-input (torch Linear); false for Conv1D.
  bool out_in_layout = false;
  // Required when head count cannot be read from a 3-D tensor shape.
  std::optional<Index> n_heads;

  static NameMap parse(const std::string& json_text);
  static NameMap load(const std::filesystem::path& path);
  std::string to_json() const;
  const std::string& key(const std::string& canonical) const;
};

// Dense array as stored in a named-tensor container; payload widened to double.
struct TensorData {
  std::vector<Index> shape;
  std::vector<double> values;
  Index numel() const;
};

enum class StorageType { F32, F64 };

// Reads the requested tensors (all of them when `names` is empty) from a
// single-file named-tensor container or from a directory of raw arrays.
std::map<std::string, TensorData> read_tensors(const std::filesystem::path& path,
                                               const std::vector<std::string>& names = {});

void write_tensor_container(const std::filesystem::path& path,
                            const std::map<std::string, TensorData>& tensors,
                            StorageType storage = StorageType::F32);

void write_tensor_directory(const std::filesystem::path& dir,
                            const std::map<std::string, TensorData>& tensors,
                            StorageType storage = StorageType::F32);

struct RawCheckpoint {
  std::map<std::string, Eigen::MatrixXd> tensors;
  Dims dims;

  const Eigen::MatrixXd& at(const std::string& canonical) const;
};

RawCheckpoint load_checkpoint(const std::filesystem::path& path, const NameMap& name_map);

// Builds the canonical tensor set from already-read container tensors.
RawCheckpoint assemble_checkpoint(const std::map<std::string, TensorData>& container,
                                  const NameMap& name_map);

// Checks presence, finiteness-independent shape consistency, and derives dims.
Dims infer_dims(const std::map<std::string, Eigen::MatrixXd>& tensors, Index n_heads);

// Name map for the canonical names themselves, split q/k/v, input-by-output layout.
NameMap canonical_name_map(Index n_heads);

// Centered, LayerNorm-folded layer-0 weights. Head h owns columns
// [h*d_head, (h+1)*d_head) of the query/key/value projections and the matching
// rows of the output projection.
template <typename Scalar>
struct Folded {
  Dims dims;
  Mat<Scalar> token_embed;  // d_voc x d_model
  Mat<Scalar> pos_embed;    // n_ctx x d_model
  Mat<Scalar> w_query, w_key, w_value;  // d_model x (n_heads*d_head)
  Vec<Scalar> b_query, b_key, b_value;
  Mat<Scalar> w_out;  // (n_heads*d_head) x d_model
  Vec<Scalar> b_out;
  Mat<Scalar> w_mlp_in;  // d_model x d_mlp
  Vec<Scalar> b_mlp_in;

  auto query_weight(Index h) const { return w_query.middleCols(h * dims.d_head, dims.d_head); }
  auto key_weight(Index h) const { return w_key.middleCols(h * dims.d_head, dims.d_head); }
  auto value_weight(Index h) const { return w_value.middleCols(h * dims.d_head, dims.d_head); }
  auto query_bias(Index h) const { return b_query.segment(h * dims.d_head, dims.d_head); }
  auto key_bias(Index h) const { return b_key.segment(h * dims.d_head, dims.d_head); }
  auto value_bias(Index h) const { return b_value.segment(h * dims.d_head, dims.d_head); }
  auto out_weight(Index h) const { return w_out.middleRows(h * dims.d_head, dims.d_head); }
};

using FoldedModel = Folded<double>;

namespace detail {

inline void require_finite(const Eigen::MatrixXd& m, const std::string& name) {
  if (!m.allFinite()) fail(ErrorCode::NonFiniteWeight, "non-finite value in " + name);
}

// Subtracts each row's mean.
template <typename Derived>
void center_rows(Eigen::MatrixBase<Derived>& m) {
  m.colwise() -= m.rowwise().mean();
}

// Subtracts each column's mean, i.e. centers along the input (row) dimension.
template <typename Derived>
void center_cols(Eigen::MatrixBase<Derived>& m) {
  m.rowwise() -= m.colwise().mean();
}

}  // namespace detail

// Centers the embeddings, folds both LayerNorm gains and biases into the
// adjacent reading weights, and centers every weight that reads from or
// writes to the residual stream.
template <typename Scalar = double>
Folded<Scalar> fold_model(const RawCheckpoint& raw) {
  using namespace tensor_names;
  for (const auto& [name, m] : raw.tensors) detail::require_finite(m, name);
  raw.dims.validate();

  Eigen::MatrixXd token = raw.at(kTokenEmbedding);
  Eigen::MatrixXd pos = raw.at(kPosEmbedding);
  detail::center_rows(token);
  detail::center_rows(pos);

  const Eigen::VectorXd g1 = raw.at(kLn1Weight);
  const Eigen::VectorXd beta1 = raw.at(kLn1Bias);
  auto fold_reader = [&](const char* w_name, const char* b_name) {
    const Eigen::MatrixXd& w = raw.at(w_name);
    Eigen::MatrixXd folded = g1.asDiagonal() * w;
    detail::center_cols(folded);
    Eigen::VectorXd bias = raw.at(b_name).col(0) + w.transpose() * beta1;
    return std::pair{std::move(folded), std::move(bias)};
  };
  auto [wq, bq] = fold_reader(kQWeight, kQBias);
  auto [wk, bk] = fold_reader(kKWeight, kKBias);
  auto [wv, bv] = fold_reader(kVWeight, kVBias);

  Eigen::MatrixXd wo = raw.at(kAttnOutWeight);
  detail::center_rows(wo);
  Eigen::VectorXd bo = raw.at(kAttnOutBias).col(0);
  bo.array() -= bo.mean();

  const Eigen::VectorXd g2 = raw.at(kLn2Weight);
  const Eigen::VectorXd beta2 = raw.at(kLn2Bias);
  const Eigen::MatrixXd& w_in = raw.at(kMlpInWeight);
  Eigen::MatrixXd win = g2.asDiagonal() * w_in;
  detail::center_cols(win);
  Eigen::VectorXd bin = raw.at(kMlpInBias).col(0) + w_in.transpose() * beta2;

  Folded<Scalar> out;
  out.dims = raw.dims;
  out.token_embed = token.template cast<Scalar>();
  out.pos_embed = pos.template cast<Scalar>();
  out.w_query = wq.template cast<Scalar>();
  out.w_key = wk.template cast<Scalar>();
  out.w_value = wv.template cast<Scalar>();
  out.b_query = bq.template cast<Scalar>();
  out.b_key = bk.template cast<Scalar>();
  out.b_value = bv.template cast<Scalar>();
  out.w_out = wo.template cast<Scalar>();
  out.b_out = bo.template cast<Scalar>();
  out.w_mlp_in = win.template cast<Scalar>();
  out.b_mlp_in = bin.template cast<Scalar>();
  return out;
}

// Re-expresses a folded model as a raw checkpoint with unit gains and zero
// LayerNorm biases, so that folding it again is the identity.
template <typename Scalar>
RawCheckpoint to_raw(const Folded<Scalar>& m) {
  using namespace tensor_names;
  RawCheckpoint raw;
  raw.dims = m.dims;
  const Index d = m.dims.d_model;
  auto put = [&](const char* name, const auto& value) {
    raw.tensors[name] = value.template cast<double>();
  };
  put(kTokenEmbedding, m.token_embed);
  put(kPosEmbedding, m.pos_embed);
  raw.tensors[kLn1Weight] = Eigen::VectorXd::Ones(d);
  raw.tensors[kLn1Bias] = Eigen::VectorXd::Zero(d);
  raw.tensors[kLn2Weight] = Eigen::VectorXd::Ones(d);
  raw.tensors[kLn2Bias] = Eigen::VectorXd::Zero(d);
  put(kQWeight, m.w_query);
  put(kKWeight, m.w_key);
  put(kVWeight, m.w_value);
  put(kQBias, m.b_query);
  put(kKBias, m.b_key);
  put(kVBias, m.b_value);
  put(kAttnOutWeight, m.w_out);
  put(kAttnOutBias, m.b_out);
  put(kMlpInWeight, m.w_mlp_in);
  put(kMlpInBias, m.b_mlp_in);
  return raw;
}

}  // namespace circuit_lens
