#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "check_error.hpp"
#include "circuit_lens/discovery.hpp"

using namespace circuit_lens;

namespace {

ContributionTable random_table(Index rows, Index cols, std::uint64_t seed, float scale = 4.0f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, scale);
  ContributionTable t;
  t.values.resize(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) t.values(r, c) = normal(rng);
  return t;
}

Vocab mini_vocab() { return Vocab::load(CIRCUIT_LENS_TEST_DATA "/mini_vocab.json"); }

}  // namespace

TEST_CASE("order statistic") {
  std::vector<float> row;
  for (int v = 1; v <= 25; ++v) row.push_back(v % 2 ? float(v) : -float(v));
  std::shuffle(row.begin(), row.end(), std::mt19937(3));
  CHECK(top_stat(row, 20) == 6.0);
  CHECK(top_stat(row, 1) == 25.0);
  const std::vector<float> constant(30, -2.5f);
  for (Index k : {1, 7, 30}) CHECK(top_stat(constant, k) == 2.5);
  CHECK_ERROR_CODE(top_stat(row, 26), ErrorCode::RankOutOfRange);
  CHECK_ERROR_CODE(top_stat(row, 0), ErrorCode::RankOutOfRange);
}

TEST_CASE("selection matches a full sort") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> len(1, 300);
  std::normal_distribution<float> normal;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> row(static_cast<std::size_t>(len(rng)));
    for (auto& v : row) v = normal(rng);
    if (trial % 3 == 0)
      for (std::size_t i = 0; i + 1 < row.size(); i += 2) row[i + 1] = -row[i];  // ties in |value|
    std::vector<float> mags(row.size());
    std::transform(row.begin(), row.end(), mags.begin(), [](float v) { return std::abs(v); });
    std::sort(mags.begin(), mags.end(), std::greater<>());
    std::uniform_int_distribution<Index> pick(1, static_cast<Index>(row.size()));
    const Index k = pick(rng);
    CHECK(top_stat(row, k) == mags[static_cast<std::size_t>(k - 1)]);
  }
}

TEST_CASE("neuron selection") {
  const auto table = random_table(30, 200, 5);
  DiscoveryConfig cfg;
  SUBCASE("threshold above the global maximum") {
    cfg.theta = table.values.cwiseAbs().maxCoeff() + 1;
    CHECK(select_neurons(table, cfg).empty());
  }
  SUBCASE("tiny threshold keeps every neuron") {
    cfg.theta = 1e-30;
    CHECK(select_neurons(table, cfg).size() == 30);
  }
  SUBCASE("sorted and thresholded") {
    const auto sel = select_neurons(table, cfg);
    for (std::size_t i = 0; i + 1 < sel.size(); ++i) CHECK(sel[i].top >= sel[i + 1].top);
    for (Index j = 0; j < 30; ++j) {
      const auto row = table.values.row(j);
      const double top = top_stat(std::span<const float>(row.data(), 200), cfg.rank);
      const bool listed = std::any_of(sel.begin(), sel.end(), [&](const auto& s) { return s.neuron == j; });
      CHECK(listed == (top >= cfg.theta));
    }
  }
  SUBCASE("monotone in the threshold") {
    std::vector<Index> prev;
    bool first = true;
    for (double theta : {0.5, 2.0, 4.0, 6.0, 8.0}) {
      cfg.theta = theta;
      std::vector<Index> ids;
      for (const auto& s : select_neurons(table, cfg)) ids.push_back(s.neuron);
      std::sort(ids.begin(), ids.end());
      if (!first) CHECK(std::includes(prev.begin(), prev.end(), ids.begin(), ids.end()));
      prev = ids;
      first = false;
    }
  }
  SUBCASE("equal statistics keep neuron order") {
    ContributionTable flat;
    flat.values = RowMat<float>::Constant(6, 40, 7.0f);
    cfg.theta = 1.0;
    const auto sel = select_neurons(flat, cfg, 3);
    for (std::size_t i = 0; i < sel.size(); ++i) CHECK(sel[i].neuron == static_cast<Index>(i));
  }
  SUBCASE("worker count does not change the result") {
    const auto a = select_neurons(table, cfg, 1), b = select_neurons(table, cfg, 4);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].neuron == b[i].neuron);
  }
  cfg.theta = 0;
  CHECK_ERROR_CODE(select_neurons(table, cfg), ErrorCode::ConfigError);
}

TEST_CASE("neuron reports") {
  const Vocab vocab = mini_vocab();
  DiscoveryConfig cfg{5.0, 3, 4};
  ContributionTable t;
  t.values = RowMat<float>::Zero(2, 20);
  SUBCASE("zero row") {
    const auto r = neuron_report(t, &vocab, 1, cfg);
    CHECK(r.most_positive.size() == 4);
    for (const auto& tv : r.most_positive) CHECK(tv.value == 0.0f);
    for (const auto& tv : r.most_negative) CHECK(tv.value == 0.0f);
    // Ties break by token id.
    CHECK(r.most_positive[0].token == 0);
    CHECK(r.most_positive[3].token == 3);
  }
  SUBCASE("sorted, decoded and exact") {
    for (Index c = 0; c < 20; ++c) t.values(0, c) = float((c * 7) % 20) - 9.5f;
    t.values(0, 3) = t.values(0, 18) = 20.0f;
    const auto r = neuron_report(t, &vocab, 0, cfg);
    CHECK(r.most_positive[0].token == 3);
    CHECK(r.most_positive[1].token == 18);
    CHECK(r.most_positive[0].text == " cat");
    for (std::size_t k = 0; k + 1 < 4; ++k) {
      CHECK(r.most_positive[k].value >= r.most_positive[k + 1].value);
      CHECK(r.most_negative[k].value <= r.most_negative[k + 1].value);
    }
    for (const auto& tv : r.most_positive) CHECK(tv.value == t.values(0, tv.token));
    for (const auto& tv : r.most_negative) CHECK(tv.value == t.values(0, tv.token));
    CHECK(r.top == 9.5);  // third largest |value| after the two 20s
  }
  SUBCASE("deny list") {
    t.values(0, 3) = 30.0f;
    t.values(0, 4) = 20.0f;
    const auto r = neuron_report(t, &vocab, 0, cfg, {3});
    CHECK(r.most_positive[0].token == 4);
    const auto path = std::filesystem::temp_directory_path() / "circuit_lens_test_deny.txt";
    std::ofstream(path) << "# comment\n cat\nid:4\n";
    CHECK(load_deny_list(path, &vocab, 20) == std::set<TokenId>{3, 4});
  }
  SUBCASE("without a vocabulary tokens print as ids") {
    const auto r = neuron_report(t, nullptr, 0, cfg);
    CHECK(r.most_positive[0].text == "id:0");
  }
  CHECK_ERROR_CODE(neuron_report(t, &vocab, 2, cfg), ErrorCode::NeuronOutOfRange);
}
