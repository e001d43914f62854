// Acceptance checks that need no external checkpoint: toy models, synthetic
// i.i.d. draws, and the CLI run end to end on a toy checkpoint.
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "../toy_model.hpp"
#include "circuit_lens/circuit.hpp"
#include "circuit_lens/discovery.hpp"
#include "circuit_lens/io.hpp"
#include "circuit_lens/stability.hpp"
#include "circuit_lens/validate.hpp"
#include "verdicts.hpp"

using namespace circuit_lens;
using namespace circuit_lens::acceptance;
namespace fs = std::filesystem;

namespace {

Eigen::VectorXd stable_softmax(const Eigen::VectorXd& s) {
  const Eigen::VectorXd e = (s.array() - s.maxCoeff()).exp();
  return e / e.sum();
}

Eigen::RowVectorXd unit_scaled(const Eigen::RowVectorXd& v) { return std::sqrt(double(v.size())) * v / v.norm(); }

// Approximate attention row of head h at position n, built key by key from the
// folded weights: content key from the token embedding shifted to position n,
// positional key from the position embedding difference, plain softmax.
Eigen::VectorXd approx_row_oracle(const FoldedModel& m, Index h, Index n, std::span<const TokenId> x) {
  const Eigen::VectorXd norms = m.token_embed.rowwise().norm();
  const double c = 0.5 * (norms.minCoeff() + norms.maxCoeff());
  const double d = double(m.dims.d_model);
  const auto tok = [&](Index i) { return x[static_cast<std::size_t>(i - 1)]; };
  const Eigen::RowVectorXd pn = m.pos_embed.row(n - 1);
  const Eigen::RowVectorXd q = unit_scaled(m.token_embed.row(tok(n)) + pn) * m.query_weight(h) +
                               m.query_bias(h).transpose();
  Eigen::VectorXd scores(n);
  for (Index i = 1; i <= n; ++i) {
    const Eigen::RowVectorXd pi = m.pos_embed.row(i - 1);
    const Eigen::RowVectorXd content = unit_scaled(m.token_embed.row(tok(i)) + pn) * m.key_weight(h);
    const Eigen::RowVectorXd position = std::sqrt(d) / std::sqrt(pi.squaredNorm() + c * c) * (pi - pn) * m.key_weight(h);
    scores(i - 1) = q.dot(content + position) / std::sqrt(double(m.dims.d_head));
  }
  return stable_softmax(scores);
}

// Layer-0 forward on the unfolded weights with explicit LayerNorm (no epsilon),
// one position at a time.
struct StraightLine {
  std::vector<Eigen::MatrixXd> attn;
  Eigen::MatrixXd mlp_pre;
};

Eigen::RowVectorXd layer_norm(const Eigen::RowVectorXd& v, const Eigen::MatrixXd& gain, const Eigen::MatrixXd& bias) {
  const Eigen::RowVectorXd centered = v.array() - v.mean();
  const double sd = std::sqrt(centered.squaredNorm() / double(v.size()));
  return (centered / sd).cwiseProduct(gain.col(0).transpose()) + bias.col(0).transpose();
}

StraightLine straight_line(const RawCheckpoint& raw, std::span<const TokenId> x) {
  using namespace tensor_names;
  const Dims& d = raw.dims;
  const Index len = static_cast<Index>(x.size());
  Eigen::MatrixXd resid(len, d.d_model), normed(len, d.d_model);
  for (Index i = 0; i < len; ++i) {
    resid.row(i) = raw.at(kTokenEmbedding).row(x[static_cast<std::size_t>(i)]) + raw.at(kPosEmbedding).row(i);
    normed.row(i) = layer_norm(resid.row(i), raw.at(kLn1Weight), raw.at(kLn1Bias));
  }
  const Eigen::MatrixXd q = (normed * raw.at(kQWeight)).rowwise() + raw.at(kQBias).col(0).transpose();
  const Eigen::MatrixXd k = (normed * raw.at(kKWeight)).rowwise() + raw.at(kKBias).col(0).transpose();
  const Eigen::MatrixXd v = (normed * raw.at(kVWeight)).rowwise() + raw.at(kVBias).col(0).transpose();
  StraightLine out;
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(len, d.n_heads * d.d_head);
  for (Index h = 0; h < d.n_heads; ++h) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(len, len);
    const Index c0 = h * d.d_head;
    for (Index n = 0; n < len; ++n) {
      Eigen::VectorXd s(n + 1);
      for (Index i = 0; i <= n; ++i)
        s(i) = q.row(n).segment(c0, d.d_head).dot(k.row(i).segment(c0, d.d_head)) / std::sqrt(double(d.d_head));
      a.row(n).head(n + 1) = stable_softmax(s).transpose();
      for (Index i = 0; i <= n; ++i) z.row(n).segment(c0, d.d_head) += a(n, i) * v.row(i).segment(c0, d.d_head);
    }
    out.attn.push_back(a);
  }
  const Eigen::MatrixXd post = resid + ((z * raw.at(kAttnOutWeight)).rowwise() + raw.at(kAttnOutBias).col(0).transpose());
  out.mlp_pre.resize(len, d.d_mlp);
  for (Index n = 0; n < len; ++n)
    out.mlp_pre.row(n) = layer_norm(post.row(n), raw.at(kLn2Weight), raw.at(kLn2Bias)) * raw.at(kMlpInWeight) +
                         raw.at(kMlpInBias).col(0).transpose();
  return out;
}

void factorization_identity(Verdicts& v) {
  Stopwatch clock;
  std::mt19937_64 rng(101);
  double worst = 0;
  int probes = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Dims d{32, 300, 128, 4, 8, 48};
    const auto m = fold_model(testing::make_toy_raw(d, 1000 + seed, 1.0 + seed));
    const auto g = key_geometry(m);
    std::uniform_int_distribution<Index> head(0, d.n_heads - 1), pos(1, d.n_ctx);
    for (int k = 0; k < 200; ++k, ++probes) {
      const auto x = testing::random_tokens(d.n_ctx, d.d_voc, rng());
      const Index h = head(rng), n = pos(rng);
      const Eigen::VectorXd fact = attn_approx_row(m, g, h, n, x);
      worst = std::max(worst, (fact - approx_row_oracle(m, h, n, x)).cwiseAbs().maxCoeff());
    }
  }
  const double secs = clock.seconds();
  v.record(1, "factorization identity", worst <= 1e-12 && secs < 10,
           std::to_string(probes) + " probes, max abs diff " + fmt(worst) + " (tol 1e-12), " + fmt(secs) + " s (limit 10)");
}

void oracle_fidelity(Verdicts& v) {
  Stopwatch clock;
  double worst_attn = 0, worst_pre = 0;
  int models = 0;
  for (std::uint64_t seed = 0; seed < 6; ++seed, ++models) {
    const Dims d = seed % 2 ? Dims{32, 200, 96, 4, 8, 64} : testing::toy_dims();
    const auto raw = testing::make_toy_raw(d, 2000 + seed, 0.5 + double(seed));
    const auto m = fold_model(raw);
    const auto x = testing::random_tokens(d.n_ctx, d.d_voc, 3000 + seed);
    const auto folded = run_layer_one(m, std::span<const TokenId>(x));
    const auto ref = straight_line(raw, x);
    for (Index h = 0; h < d.n_heads; ++h)
      worst_attn = std::max(worst_attn, (folded.attn[static_cast<std::size_t>(h)] - ref.attn[static_cast<std::size_t>(h)]).cwiseAbs().maxCoeff());
    worst_pre = std::max(worst_pre, (folded.mlp_pre - ref.mlp_pre).cwiseAbs().maxCoeff());
  }
  const double secs = clock.seconds();
  v.record(2, "oracle fidelity", worst_attn <= 1e-5 && worst_pre <= 1e-5 && secs < 30,
           std::to_string(models) + " toy checkpoints, max abs diff attention " + fmt(worst_attn) + ", MLP pre-activation " +
               fmt(worst_pre) + " (tol 1e-5), " + fmt(secs) + " s (limit 30)");
}

std::vector<double> normalized(std::vector<double> w) {
  double s = 0;
  for (double e : w) s += e;
  for (double& e : w) e /= s;
  return w;
}

void concentration_bounds(Verdicts& v) {
  Stopwatch clock;
  constexpr std::size_t kLen = 128, kTrials = 20000;
  std::mt19937_64 rng(202);

  std::vector<std::pair<std::string, std::vector<double>>> kernels;
  kernels.emplace_back("uniform", normalized(std::vector<double>(kLen, 1.0)));
  std::vector<double> decay(kLen), spiky(kLen), random(kLen);
  for (std::size_t i = 0; i < kLen; ++i) decay[i] = std::pow(0.97, double(kLen - 1 - i));
  kernels.emplace_back("decaying", normalized(decay));
  std::gamma_distribution<double> gamma(0.5, 1.0);
  for (auto& e : random) e = gamma(rng);
  kernels.emplace_back("random", normalized(random));
  for (std::size_t i = 0; i < kLen; ++i) spiky[i] = i % 16 == 0 ? 20.0 : 0.2;
  kernels.emplace_back("spiky", normalized(spiky));

  struct Content {
    std::string name;
    std::vector<double> values, probs;
  };
  std::vector<Content> contents;
  {
    Content c{"lognormal", {}, {}};
    std::normal_distribution<double> normal(0.0, 0.6);
    for (int k = 0; k < 50; ++k) c.values.push_back(std::exp(normal(rng)));
    c.probs = normalized(std::vector<double>(50, 1.0));
    contents.push_back(c);
  }
  contents.push_back({"two-point", {0.5, 2.0}, {0.7, 0.3}});
  {
    Content c{"zipf", {}, {}};
    std::normal_distribution<double> normal(0.0, 0.4);
    for (int k = 1; k <= 200; ++k) {
      c.values.push_back(std::exp(normal(rng)));
      c.probs.push_back(1.0 / k);
    }
    c.probs = normalized(c.probs);
    contents.push_back(c);
  }

  int cells = 0, held = 0;
  std::string worst;
  double worst_ratio = 0;
  for (const auto& [kname, kernel] : kernels)
    for (const auto& content : contents)
      for (double mult : {1.0, 2.5}) {
        MonteCarloCell cell{kernel, content.values, content.probs, 0};
        double mean = 0, var = 0;
        for (std::size_t k = 0; k < cell.values.size(); ++k) mean += cell.probs[k] * cell.values[k];
        for (std::size_t k = 0; k < cell.values.size(); ++k)
          var += cell.probs[k] * (cell.values[k] - mean) * (cell.values[k] - mean);
        cell.deviation = mult * std::sqrt(kernel_spread(kernel) * var);
        const auto r = simulate_deviation(cell, kTrials, 7, static_cast<std::uint64_t>(cells));
        ++cells;
        const bool ok = r.empirical <= r.hoeffding && r.empirical <= r.chebyshev;
        held += ok;
        const double ratio = r.empirical / std::min(r.hoeffding, r.chebyshev);
        if (ratio >= worst_ratio) {
          worst_ratio = ratio;
          worst = kname + "/" + content.name + "/t=" + fmt(mult) + "sd: empirical " + fmt(r.empirical) + ", Hoeffding " +
                  fmt(r.hoeffding) + ", Chebyshev " + fmt(r.chebyshev);
        }
      }
  const double secs = clock.seconds();
  v.record(5, "concentration bounds", held == cells && cells >= 20 && secs < 120,
           std::to_string(held) + "/" + std::to_string(cells) + " cells hold at " + std::to_string(kTrials) +
               " trials; tightest " + worst + "; " + fmt(secs) + " s (limit 120)");
}

// Exact and approximate OV expectations computed from the folded weights
// without the library's attention code.
struct OvOracle {
  double exact = 0, approx = 0, tv = 0;
};

OvOracle ov_oracle(const FoldedModel& m, std::span<const TokenId> x, Index h, Index n, Index j) {
  const Dims& d = m.dims;
  Eigen::MatrixXd normed(n, d.d_model);
  for (Index i = 0; i < n; ++i) normed.row(i) = unit_scaled(m.token_embed.row(x[static_cast<std::size_t>(i)]) + m.pos_embed.row(i));
  Eigen::RowVectorXd post = m.token_embed.row(x[static_cast<std::size_t>(n - 1)]) + m.pos_embed.row(n - 1);
  post += m.b_out.transpose();
  Eigen::VectorXd exact_h;
  for (Index g = 0; g < d.n_heads; ++g) {
    const Eigen::RowVectorXd q = normed.row(n - 1) * m.query_weight(g) + m.query_bias(g).transpose();
    const Eigen::MatrixXd keys = (normed * m.key_weight(g)).rowwise() + m.key_bias(g).transpose();
    const Eigen::VectorXd a = stable_softmax(keys * q.transpose() / std::sqrt(double(d.d_head)));
    const Eigen::MatrixXd values = (normed * m.value_weight(g)).rowwise() + m.value_bias(g).transpose();
    post += (a.transpose() * values) * m.out_weight(g);
    if (g == h) exact_h = a;
  }
  const Eigen::RowVectorXd centered = post.array() - post.mean();
  const double ln = centered.norm() / std::sqrt(double(d.d_model));
  const Eigen::VectorXd readout = normed * m.value_weight(h) * m.out_weight(h) * m.w_mlp_in.col(j);
  const Eigen::VectorXd approx_h = approx_row_oracle(m, h, n, x);
  return {exact_h.dot(readout) / ln, approx_h.dot(readout) / ln, 0.5 * (exact_h - approx_h).cwiseAbs().sum()};
}

void ov_inequality(Verdicts& v) {
  Stopwatch clock;
  std::mt19937_64 rng(303);
  int tuples = 0, held = 0;
  double max_tv = 0, tightest = 0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const Dims d{32, 300, 128, 4, 8, 48};
    const auto m = fold_model(testing::make_toy_raw(d, 4000 + seed, 0.5 + seed));
    std::uniform_int_distribution<Index> head(0, d.n_heads - 1), pos(1, d.n_ctx), neuron(0, d.d_mlp - 1);
    for (int k = 0; k < 50; ++k, ++tuples) {
      const auto x = testing::random_tokens(d.n_ctx, d.d_voc, rng());
      const Index h = head(rng), n = pos(rng), j = neuron(rng);
      const auto o = ov_oracle(m, x, h, n, j);
      const double bound = ov_error_bound(m, x, h, n, j, o.tv);
      const double gap = std::abs(o.exact - o.approx);
      held += gap <= bound + 1e-12;
      max_tv = std::max(max_tv, o.tv);
      if (bound > 0) tightest = std::max(tightest, gap / bound);
    }
  }
  const double secs = clock.seconds();
  v.record(9, "OV error inequality", held == tuples && secs < 300,
           std::to_string(held) + "/" + std::to_string(tuples) + " tuples within the bound (max TV " + fmt(max_tv) +
               ", largest gap/bound " + fmt(tightest) + "), " + fmt(secs) + " s (limit 300)");
}

int run(const std::string& command) { return std::system(command.c_str()); }

std::string quoted(const fs::path& p) { return "'" + p.string() + "'"; }

void determinism(Verdicts& v, const fs::path& cli) {
  Stopwatch clock;
  const fs::path dir = fs::temp_directory_path() / ("circuit_lens_determinism_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);

  const Dims d{32, 1100, 128, 4, 8, 48};
  write_tensor_container(dir / "toy.bin", testing::to_container(testing::make_toy_raw(d, 5000)), StorageType::F32);
  write_atomic(dir / "map.json", canonical_name_map(d.n_heads).to_json());
  std::ostringstream cal;
  cal << "{\"label\": \"calibration\", \"tokens\": [";
  const auto y = testing::random_tokens(d.n_ctx, d.d_voc, 5001);
  for (std::size_t i = 0; i < y.size(); ++i) cal << (i ? ", " : "") << y[i];
  cal << "]}\n";
  write_atomic(dir / "cal.jsonl", cal.str());

  const std::string common = " --checkpoint " + quoted(dir / "toy.bin") + " --name-map " + quoted(dir / "map.json") +
                             " --calibration " + quoted(dir / "cal.jsonl") +
                             " --anchor-pos 64 --anchor-token id:7 --heads 0,1,2,3 --seed 7";
  auto table_run = [&](int workers) {
    const fs::path out = dir / ("w" + std::to_string(workers));
    return run(quoted(cli) + " table" + common + " --workers " + std::to_string(workers) + " --out " + quoted(out) +
               " > /dev/null") == 0;
  };
  bool ok = table_run(1) && table_run(3);

  // Threshold at the median order statistic so the selection is non-trivial.
  double theta = 1.0;
  std::size_t selected = 0;
  if (ok) {
    const auto table = read_table(dir / "w1" / "table.bin");
    std::vector<double> tops;
    for (Index r = 0; r < table.neurons(); ++r)
      tops.push_back(top_stat(std::span<const float>(table.values.row(r).data(), table.vocab()), 20));
    theta = std::max(1e-6, median(tops));
    for (double t : tops) selected += t >= theta;
  }
  auto discover_run = [&](int workers) {
    const fs::path out = dir / ("w" + std::to_string(workers));
    std::ostringstream cmd;
    cmd << quoted(cli) << " discover" << common << " --theta " << std::setprecision(17) << theta
        << " --rank 20 --width 10 --workers " << workers << " --out " << quoted(out) << " > /dev/null";
    return run(cmd.str()) == 0;
  };
  ok = ok && discover_run(1) && discover_run(3);

  std::string detail;
  for (const char* name : {"table.bin", "calibration.json", "neurons.json"}) {
    if (!ok) break;
    const bool same = fs::exists(dir / "w1" / name) && read_file(dir / "w1" / name) == read_file(dir / "w3" / name);
    detail += std::string(name) + (same ? " identical, " : " DIFFER, ");
    ok = ok && same;
  }
  const double secs = clock.seconds();
  if (!ok && detail.empty()) detail = "CLI run failed, ";
  v.record(10, "determinism", ok && selected > 0,
           detail + "1 vs 3 workers, " + std::to_string(selected) + " neurons selected, " + fmt(secs) + " s");
  fs::remove_all(dir);
}

}  // namespace

int main(int argc, char** argv) {
  Verdicts v;
  factorization_identity(v);
  oracle_fidelity(v);
  concentration_bounds(v);
  ov_inequality(v);
  if (argc > 1)
    determinism(v, argv[1]);
  else
    v.blocked(10, "determinism", "path to the circuit_lens executable not given");
  return v.exit_code();
}
