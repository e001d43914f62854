#include "circuit_lens/discovery.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace circuit_lens {

void DiscoveryConfig::validate() const {
  if (!(theta > 0)) fail(ErrorCode::ConfigError, "theta must be positive");
  if (rank < 1) fail(ErrorCode::RankOutOfRange, "rank must be at least 1");
  if (width < 1) fail(ErrorCode::ConfigError, "report width must be at least 1");
}

double top_stat(std::span<const float> row, Index k) {
  if (k < 1 || k > static_cast<Index>(row.size()))
    fail(ErrorCode::RankOutOfRange, "rank " + std::to_string(k) + " outside [1, " +
                                        std::to_string(row.size()) + "]");
  std::vector<float> mags(row.size());
  std::transform(row.begin(), row.end(), mags.begin(), [](float v) { return std::abs(v); });
  auto nth = mags.begin() + (k - 1);
  std::nth_element(mags.begin(), nth, mags.end(), std::greater<>());
  return *nth;
}

std::vector<SelectedNeuron> select_neurons(const ContributionTable& table, const DiscoveryConfig& cfg,
                                           int workers) {
  cfg.validate();
  std::vector<double> tops(static_cast<std::size_t>(table.neurons()));
  parallel_for(table.neurons(), workers, [&](Index j) {
    const auto row = table.values.row(j);
    tops[static_cast<std::size_t>(j)] =
        top_stat(std::span<const float>(row.data(), static_cast<std::size_t>(row.size())), cfg.rank);
  });
  std::vector<SelectedNeuron> out;
  for (Index j = 0; j < table.neurons(); ++j)
    if (tops[static_cast<std::size_t>(j)] >= cfg.theta) out.push_back({j, tops[static_cast<std::size_t>(j)]});
  std::stable_sort(out.begin(), out.end(),
                   [](const SelectedNeuron& a, const SelectedNeuron& b) { return a.top > b.top; });
  return out;
}

NeuronReport neuron_report(const ContributionTable& table, const Vocab* vocab, Index j,
                           const DiscoveryConfig& cfg, const std::set<TokenId>& deny) {
  cfg.validate();
  if (j < 0 || j >= table.neurons())
    fail(ErrorCode::NeuronOutOfRange, "neuron " + std::to_string(j) + " outside [0, " +
                                          std::to_string(table.neurons()) + ")");
  const auto row = table.values.row(j);
  NeuronReport r;
  r.neuron = j;
  r.top = top_stat(std::span<const float>(row.data(), static_cast<std::size_t>(row.size())), cfg.rank);

  std::vector<TokenId> ids;
  ids.reserve(static_cast<std::size_t>(row.size()));
  for (Index t = 0; t < row.size(); ++t)
    if (!deny.contains(static_cast<TokenId>(t))) ids.push_back(static_cast<TokenId>(t));
  const auto width = std::min<std::size_t>(static_cast<std::size_t>(cfg.width), ids.size());
  auto take = [&](auto before) {
    std::vector<TokenId> sorted = ids;
    std::partial_sort(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(width), sorted.end(), before);
    std::vector<TokenValue> out;
    for (std::size_t k = 0; k < width; ++k) {
      const TokenId t = sorted[k];
      out.push_back({t, vocab ? decode_token(*vocab, t) : "id:" + std::to_string(t), row(t)});
    }
    return out;
  };
  r.most_positive = take([&](TokenId a, TokenId b) { return row(a) != row(b) ? row(a) > row(b) : a < b; });
  r.most_negative = take([&](TokenId a, TokenId b) { return row(a) != row(b) ? row(a) < row(b) : a < b; });
  return r;
}

std::set<TokenId> load_deny_list(const std::filesystem::path& path, const Vocab* vocab, Index d_voc) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open deny list " + path.string());
  std::set<TokenId> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    out.insert(resolve_token(line, vocab, d_voc));
  }
  return out;
}

}  // namespace circuit_lens
