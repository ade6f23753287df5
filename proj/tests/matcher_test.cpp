#include <doctest.h>

#include <cmath>

#include "vglab/matcher.hpp"
#include "vglab/rng.hpp"

using namespace vg;

namespace {

CostMatrix random_cost(Rng& rng, int n, int m) {
  CostMatrix c;
  c.rows = n;
  c.cols = m;
  c.v.resize(static_cast<std::size_t>(n) * m);
  for (auto& x : c.v) x = rng.uniform();
  return c;
}

}  // namespace

TEST_CASE("cost matrix formula") {
  const BoxCxCyWh b{0.5, 0.5, 0.2, 0.2};
  CostWeights w;

  // perfect match limit: score -> 1 drives the whole cost to 0
  CostMatrix c = build_cost_matrix({b}, {1.0 - 1e-12}, {b}, w);
  CHECK(c.rows == 1);
  CHECK(c.cols == 1);
  CHECK(c.at(0, 0) == doctest::Approx(0.0).epsilon(1e-9));

  // score 0.5, identical boxes: only the -log(0.5) class term remains
  CostMatrix c2 = build_cost_matrix({b}, {0.5}, {b}, w);
  CHECK(c2.at(0, 0) == doctest::Approx(0.6931471805599453).epsilon(1e-12));

  // no targets: a zero-column matrix and an empty assignment
  CostMatrix c3 = build_cost_matrix({b}, {0.5}, {}, w);
  CHECK(c3.cols == 0);
  Assignment a = hungarian(c3);
  CHECK(a.pairs.empty());
  CHECK(a.total_cost == 0.0);
  CHECK(a.unmatched_predictions == std::vector<int>{0});

  CHECK_THROWS_AS(build_cost_matrix({b}, {1.5}, {b}, w), std::domain_error);
  CHECK_THROWS_AS(build_cost_matrix({b}, {0.0}, {b}, w), std::domain_error);
}

TEST_CASE("hungarian forced cases") {
  CostMatrix one;
  one.rows = one.cols = 1;
  one.v = {3.5};
  Assignment a = hungarian(one);
  CHECK(a.pairs == std::vector<std::pair<int, int>>{{0, 0}});
  CHECK(a.total_cost == 3.5);

  // zero on a permutation, one elsewhere: recovers that permutation exactly
  const std::vector<int> perm = {2, 0, 3, 1};  // target j -> prediction perm[j]
  CostMatrix c;
  c.rows = c.cols = 4;
  c.v.assign(16, 1.0);
  for (int j = 0; j < 4; ++j) c.at(perm[j], j) = 0.0;
  Assignment ap = hungarian(c);
  CHECK(ap.total_cost == 0.0);
  for (int j = 0; j < 4; ++j) CHECK(ap.pairs[j] == std::pair<int, int>{perm[j], j});

  CostMatrix infeasible;
  infeasible.rows = 1;
  infeasible.cols = 2;
  infeasible.v = {0.0, 0.0};
  CHECK_THROWS_AS(hungarian(infeasible), std::invalid_argument);
}

TEST_CASE("brute force forced cases") {
  CostMatrix empty;
  empty.rows = 3;
  empty.cols = 0;
  CHECK(brute_force_match(empty).pairs.empty());

  CostMatrix c;
  c.rows = c.cols = 2;
  c.v = {1, 2, 2, 1};
  Assignment a = brute_force_match(c);
  CHECK(a.total_cost == 2.0);
  CHECK(a.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});

  CostMatrix big;
  big.rows = big.cols = 9;
  big.v.assign(81, 0.0);
  CHECK_THROWS_AS(brute_force_match(big), std::invalid_argument);
}

TEST_CASE("hungarian equals the exhaustive oracle") {
  Rng rng(12345);
  for (int trial = 0; trial < 1000; ++trial) {
    const int m = rng.uniform_int(1, 7);
    const int n = rng.uniform_int(m, 7);
    CostMatrix c = random_cost(rng, n, m);
    Assignment h = hungarian(c);
    Assignment b = brute_force_match(c);
    CHECK(h.total_cost == b.total_cost);
    CHECK(h.pairs == b.pairs);
    CHECK(h.unmatched_predictions == b.unmatched_predictions);
  }
}

TEST_CASE("row permutation permutes pairs and preserves cost") {
  Rng rng(777);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 5, m = 3;
    CostMatrix c = random_cost(rng, n, m);
    std::vector<int> perm = {3, 0, 4, 1, 2};  // new_row[perm[i]] = old_row[i]
    CostMatrix cp = c;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) cp.at(perm[i], j) = c.at(i, j);
    Assignment a = hungarian(c), ap = hungarian(cp);
    CHECK(a.total_cost == doctest::Approx(ap.total_cost).epsilon(1e-12));
    for (std::size_t k = 0; k < a.pairs.size(); ++k) {
      CHECK(ap.pairs[k].second == a.pairs[k].second);
      CHECK(ap.pairs[k].first == perm[a.pairs[k].first]);
    }
  }
}

TEST_CASE("column offsets do not change the chosen assignment") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 6, m = 4;
    CostMatrix c = random_cost(rng, n, m);
    CostMatrix shifted = c;
    for (int j = 0; j < m; ++j) {
      const double offset = rng.uniform(0.0, 3.0);
      for (int i = 0; i < n; ++i) shifted.at(i, j) += offset;
    }
    CHECK(hungarian(c).pairs == hungarian(shifted).pairs);
  }
}
