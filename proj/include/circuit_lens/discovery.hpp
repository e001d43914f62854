#pragma once

#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "circuit_lens/circuit.hpp"
#include "circuit_lens/tokens.hpp"

namespace circuit_lens {

struct DiscoveryConfig {
  double theta = 5.0;
  Index rank = 20;
  Index width = 50;

  void validate() const;
};

// k-th largest |value|, by selection. Equal values occupy separate ranks.
double top_stat(std::span<const float> row, Index k);

struct SelectedNeuron {
  Index neuron = 0;
  double top = 0;
};

// Neurons with top_stat ≥ θ, by top_stat descending, then neuron id.
std::vector<SelectedNeuron> select_neurons(const ContributionTable& table, const DiscoveryConfig& cfg,
                                           int workers = 1);

struct TokenValue {
  TokenId token = 0;
  std::string text;
  float value = 0;
};

struct NeuronReport {
  Index neuron = 0;
  double top = 0;
  std::vector<TokenValue> most_positive;  // value descending
  std::vector<TokenValue> most_negative;  // value ascending
};

// Ties within equal values break by token id ascending. Tokens in `deny` are skipped.
NeuronReport neuron_report(const ContributionTable& table, const Vocab* vocab, Index j,
                           const DiscoveryConfig& cfg, const std::set<TokenId>& deny = {});

// One token id or decoded token per line; '#' starts a comment line.
std::set<TokenId> load_deny_list(const std::filesystem::path& path, const Vocab* vocab, Index d_voc);

}  // namespace circuit_lens
