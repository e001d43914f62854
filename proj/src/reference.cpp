#include "circuit_lens/reference.hpp"

#include <cmath>

namespace circuit_lens {

namespace {

std::vector<double> explicit_layer_norm(const std::vector<double>& v, const Eigen::MatrixXd& gain,
                                        const Eigen::MatrixXd& bias) {
  const std::size_t d = v.size();
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(d);
  double sq = 0;
  for (double x : v) sq += (x - mean) * (x - mean);
  const double scale = std::sqrt(static_cast<double>(d)) / std::sqrt(sq);
  std::vector<double> out(d);
  for (std::size_t k = 0; k < d; ++k) {
    const auto kk = static_cast<Index>(k);
    out[k] = (v[k] - mean) * scale * gain(kk, 0) + bias(kk, 0);
  }
  return out;
}

std::vector<double> affine(const std::vector<double>& x, const Eigen::MatrixXd& w,
                           const Eigen::MatrixXd& b) {
  std::vector<double> out(static_cast<std::size_t>(w.cols()));
  for (Index c = 0; c < w.cols(); ++c) {
    double acc = b(c, 0);
    for (Index r = 0; r < w.rows(); ++r) acc += x[static_cast<std::size_t>(r)] * w(r, c);
    out[static_cast<std::size_t>(c)] = acc;
  }
  return out;
}

}  // namespace

ExplicitForward explicit_layer_norm_forward(const RawCheckpoint& raw, std::span<const TokenId> tokens,
                                            bool center_embeddings) {
  using namespace tensor_names;
  const Dims& d = raw.dims;
  const auto len = tokens.size();
  const auto dm = static_cast<std::size_t>(d.d_model);
  const auto dh = static_cast<std::size_t>(d.d_head);
  const Eigen::MatrixXd& te = raw.at(kTokenEmbedding);
  const Eigen::MatrixXd& pe = raw.at(kPosEmbedding);

  std::vector<std::vector<double>> resid(len, std::vector<double>(dm));
  for (std::size_t i = 0; i < len; ++i) {
    double tmean = 0, pmean = 0;
    for (std::size_t k = 0; k < dm; ++k) {
      tmean += te(tokens[i], static_cast<Index>(k));
      pmean += pe(static_cast<Index>(i), static_cast<Index>(k));
    }
    tmean /= static_cast<double>(dm);
    pmean /= static_cast<double>(dm);
    for (std::size_t k = 0; k < dm; ++k) {
      resid[i][k] = te(tokens[i], static_cast<Index>(k)) + pe(static_cast<Index>(i), static_cast<Index>(k));
      if (center_embeddings) resid[i][k] -= tmean + pmean;
    }
  }

  std::vector<std::vector<double>> q(len), k(len), v(len);
  for (std::size_t i = 0; i < len; ++i) {
    const auto ln = explicit_layer_norm(resid[i], raw.at(kLn1Weight), raw.at(kLn1Bias));
    q[i] = affine(ln, raw.at(kQWeight), raw.at(kQBias));
    k[i] = affine(ln, raw.at(kKWeight), raw.at(kKBias));
    v[i] = affine(ln, raw.at(kVWeight), raw.at(kVBias));
  }

  const Eigen::MatrixXd& wo = raw.at(kAttnOutWeight);
  const Eigen::MatrixXd& bo = raw.at(kAttnOutBias);
  ExplicitForward out;
  out.attn.assign(static_cast<std::size_t>(d.n_heads), Eigen::MatrixXd::Zero(len, len));
  out.mlp_pre.resize(static_cast<Index>(len), d.d_mlp);
  for (std::size_t n = 0; n < len; ++n) {
    std::vector<double> post = resid[n];
    for (std::size_t k2 = 0; k2 < dm; ++k2) post[k2] += bo(static_cast<Index>(k2), 0);
    for (std::size_t h = 0; h < static_cast<std::size_t>(d.n_heads); ++h) {
      std::vector<double> scores(n + 1);
      double peak = -INFINITY;
      for (std::size_t i = 0; i <= n; ++i) {
        double s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += q[n][h * dh + c] * k[i][h * dh + c];
        scores[i] = s / std::sqrt(static_cast<double>(dh));
        peak = std::max(peak, scores[i]);
      }
      double total = 0;
      for (double& s : scores) total += (s = std::exp(s - peak));
      std::vector<double> mixed(dh, 0.0);
      for (std::size_t i = 0; i <= n; ++i) {
        const double a = scores[i] / total;
        out.attn[h](static_cast<Index>(n), static_cast<Index>(i)) = a;
        for (std::size_t c = 0; c < dh; ++c) mixed[c] += a * v[i][h * dh + c];
      }
      for (std::size_t k2 = 0; k2 < dm; ++k2) {
        double acc = 0;
        for (std::size_t c = 0; c < dh; ++c) acc += mixed[c] * wo(static_cast<Index>(h * dh + c), static_cast<Index>(k2));
        post[k2] += acc;
      }
    }
    const auto ln2 = explicit_layer_norm(post, raw.at(kLn2Weight), raw.at(kLn2Bias));
    const auto pre = affine(ln2, raw.at(kMlpInWeight), raw.at(kMlpInBias));
    for (Index j = 0; j < d.d_mlp; ++j) out.mlp_pre(static_cast<Index>(n), j) = pre[static_cast<std::size_t>(j)];
  }
  return out;
}

}  // namespace circuit_lens
