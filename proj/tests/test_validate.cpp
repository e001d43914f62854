#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "check_error.hpp"
#include "circuit_lens/validate.hpp"
#include "toy_model.hpp"

using namespace circuit_lens;

namespace {

struct Toy {
  FoldedModel m;
  KeyGeometry<double> g;
  TokenSeq x;
  explicit Toy(std::uint64_t seed = 83)
      : m(fold_model(testing::make_toy_raw(testing::toy_dims(), seed))),
        g(key_geometry(m)),
        x{testing::random_tokens(64, testing::toy_dims().d_voc, seed + 1), "toy"} {}
};

std::vector<double> noisy(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<double> v(n);
  for (auto& e : v) e = normal(rng);
  return v;
}

}  // namespace

TEST_CASE("fit statistics") {
  const auto t = noisy(50, 1);
  SUBCASE("identity") {
    const auto s = fit_stats(t, t);
    CHECK(s.r == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.fvu == doctest::Approx(0.0));
    CHECK(s.bias == doctest::Approx(0.0));
    CHECK(s.count == 50);
  }
  SUBCASE("hand-worked example") {
    const std::vector<double> truth{1, 2, 3}, approx{1, 3, 2};
    const auto s = fit_stats(truth, approx);
    CHECK(s.r == doctest::Approx(0.5));
    CHECK(s.fvu == doctest::Approx(1.0));  // sse 2 over variance sum 2
  }
  SUBCASE("correlation is affine invariant, FVU is not") {
    const auto a = noisy(50, 2);
    std::vector<double> approx(50), shifted(50);
    for (std::size_t i = 0; i < 50; ++i) {
      approx[i] = t[i] + 0.3 * a[i];
      shifted[i] = 3.0 * approx[i] + 7.0;
    }
    const auto s1 = fit_stats(t, approx), s2 = fit_stats(t, shifted);
    CHECK(s1.r == doctest::Approx(s2.r).epsilon(1e-12));
    CHECK(s2.fvu > s1.fvu);
    CHECK(s2.bias == doctest::Approx(s1.bias * 3.0 + 2.0 * std::accumulate(t.begin(), t.end(), 0.0) / 50 + 7.0));
  }
  SUBCASE("constant approximation") {
    const std::vector<double> flat(50, 1.0);
    const auto s = fit_stats(t, flat);
    CHECK_FALSE(s.r_defined);
  }
  CHECK_ERROR_CODE(fit_stats(std::vector<double>(5, 2.0), std::vector<double>(5, 1.0)),
                   ErrorCode::DegenerateVariance);
  CHECK_ERROR_CODE(fit_stats(std::vector<double>{1.0}, std::vector<double>{1.0}), ErrorCode::TooShort);
  CHECK_ERROR_CODE(fit_stats(t, std::vector<double>(3, 0.0)), ErrorCode::LengthMismatch);
}

TEST_CASE("position grid") {
  CHECK(position_grid(10, 3, 1024) == std::vector<Index>{3, 6, 9});
  CHECK(position_grid(2000, 500, 1024) == std::vector<Index>{500, 1000});
  CHECK(position_grid(4, 5, 1024).empty());
  CHECK_ERROR_CODE(position_grid(10, 0, 1024), ErrorCode::ConfigError);
  CHECK(median({3, 1, 2}) == 2.0);
  CHECK(median({4, 1, 2, 3}) == 2.5);
}

TEST_CASE("exact substitution series") {
  Toy t;
  const HeadSet H{{0, 2}};
  const TokenId sub = 5;
  SUBCASE("single-position grid matches a direct probe") {
    const Index grid[] = {1};
    const auto s = true_series(t.m, H, t.x, 3, grid, sub);
    std::vector<TokenId> one{sub};
    const auto probe = probe_sequence(t.m, std::span<const TokenId>(one), 1);
    CHECK(s.truth[0] == doctest::Approx(heads_ov_contributions(t.m, probe, H.view())(3)).epsilon(1e-12));
  }
  SUBCASE("each row substitutes only its own position") {
    const auto grid = position_grid(60, 7, t.m.dims.n_ctx);
    const Mat<double> all = true_contributions(t.m, H, t.x.view(), grid, sub);
    for (std::size_t k = 0; k < grid.size(); ++k) {
      std::vector<TokenId> y = t.x.ids;
      y[static_cast<std::size_t>(grid[k] - 1)] = sub;
      const auto probe = probe_sequence(t.m, std::span<const TokenId>(y), grid[k]);
      const Eigen::VectorXd want = heads_ov_contributions(t.m, probe, H.view());
      CHECK((all.row(static_cast<Index>(k)).transpose() - want).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("suffix tokens do not matter") {
    const auto grid = position_grid(40, 5, t.m.dims.n_ctx);
    TokenSeq y = t.x;
    for (std::size_t i = 40; i < y.ids.size(); ++i) y.ids[i] = (y.ids[i] + 1) % 40;
    const auto a = true_contributions(t.m, H, t.x.view(), grid, sub);
    const auto b = true_contributions(t.m, H, y.view(), grid, sub);
    CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("grid checks") {
    const Index bad[] = {4, 4};
    CHECK_ERROR_CODE(true_contributions(t.m, H, t.x.view(), bad, sub), ErrorCode::ConfigError);
    const Index far[] = {65};
    CHECK_ERROR_CODE(true_contributions(t.m, H, t.x.view(), far, sub), ErrorCode::PositionOutOfRange);
  }
}

TEST_CASE("approximate substitution series") {
  Toy t;
  const auto cal = calibrate(t.m, t.g, HeadSet{{0, 1}}, t.x, 30, 5);
  SUBCASE("zero table gives a zero series") {
    auto table = contribution_table(t.m, t.g, cal);
    table.values.setZero();
    SubstitutionSeries s{"toy", 2, position_grid(60, 10, 64), {}, {}};
    approx_series(t.m, t.g, table, cal, t.x, s);
    for (double v : s.approx) CHECK(v == 0.0);
  }
  SUBCASE("anchor row reproduces the calibrated kernel") {
    const auto table = contribution_table<double>(t.m, t.g, cal);
    const Index grid[] = {30};
    const auto rows = approx_contributions_grid(t.m, t.g, table, cal.heads, t.x.view(), grid, cal.token);
    const Eigen::VectorXd direct = approx_contributions(table, cal.median, t.x.view());
    CHECK((rows.row(0).transpose() - direct).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("corpus fit pairs texts and neurons") {
    Corpus corpus;
    for (std::uint64_t s = 0; s < 4; ++s) corpus.sequences.push_back({testing::random_tokens(40, 40, 300 + s), ""});
    const auto table = contribution_table(t.m, t.g, cal);
    const Index neurons[] = {0, 7};
    const auto f1 = corpus_fit(t.m, table, cal, corpus, neurons, 1);
    const auto f2 = corpus_fit(t.m, table, cal, corpus, neurons, 3);
    CHECK(f1.truth == f2.truth);
    CHECK(f1.approx == f2.approx);
    const Index grid[] = {30};
    const auto truth = true_contributions(t.m, cal.heads, corpus.sequences[2].view(), grid, cal.token);
    CHECK(f1.truth(2, 1) == doctest::Approx(truth(0, 7)).epsilon(1e-12));
    corpus.sequences.push_back({{1, 2, 3}, "short"});
    CHECK_ERROR_CODE(corpus_fit(t.m, table, cal, corpus, neurons), ErrorCode::TooShort);
  }
}

TEST_CASE("attention TV and the OV error bound") {
  Toy t;
  const HeadSet all{{0, 1, 2, 3}};
  SUBCASE("TV lies in [0, 1] and vanishes at the first position") {
    const auto rows = tv_report(t.m, t.g, t.x.view(), all);
    CHECK(rows.size() == 64 * 4);
    for (const auto& e : rows) {
      CHECK(e.tv >= 0.0);
      CHECK(e.tv <= 1.0);
      if (e.position == 1) CHECK(e.tv == doctest::Approx(0.0));
    }
  }
  SUBCASE("TV vanishes when the factorization is exact") {
    t.m.pos_embed.setZero();
    t.m.b_key.setZero();
    t.g = key_geometry(t.m);
    for (const auto& e : tv_report(t.m, t.g, t.x.view(), all)) CHECK(e.tv < 1e-12);
  }
  SUBCASE("bound holds on random texts") {
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto x = testing::random_tokens(64, 40, 500 + s);
      for (Index n : {2, 17, 64})
        for (Index h = 0; h < 4; ++h) {
          const auto b = ov_bound_check(t.m, t.g, x, h, n, static_cast<Index>(s * 11 % 24));
          CHECK(std::abs(b.exact - b.approx) <= b.bound + 1e-12);
          CHECK(ov_error_bound(t.m, x, h, n, static_cast<Index>(s * 11 % 24), b.tv) ==
                doctest::Approx(b.bound).epsilon(1e-12));
        }
    }
  }
  SUBCASE("zero TV or constant readout gives a zero bound") {
    CHECK(ov_error_bound(t.m, t.x.view(), 1, 20, 3, 0.0) == 0.0);
    std::vector<TokenId> same(20, 9);
    t.m.pos_embed.setZero();
    CHECK(ov_error_bound(t.m, same, 1, 20, 3, 0.7) == doctest::Approx(0.0).scale(1.0));
    CHECK_ERROR_CODE(ov_error_bound(t.m, t.x.view(), 1, 20, 3, 1.5), ErrorCode::ConfigError);
  }
  CHECK_ERROR_CODE(tv_report(t.m, t.g, std::vector<TokenId>{1}, all), ErrorCode::TooShort);
}
