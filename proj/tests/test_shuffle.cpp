#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "esparse/shuffle.hpp"
#include "oracles.hpp"

using namespace esparse;

namespace {

oracle::Dense to_dense(const MatrixD& m) { return {m.rows(), m.cols(), m.storage()}; }

MatrixD random_xi(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  return MatrixD(rows, cols, testutil::uniform(rows * cols, seed));
}

std::vector<std::size_t> random_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), std::mt19937_64(seed));
  return order;
}

// Optimal retained mass over all partitions of C <= 16 channels into groups
// of m; the order inside and across groups does not change the objective.
double partition_optimum(const oracle::Dense& xi, std::size_t n, std::size_t m) {
  const std::size_t c = xi.cols;
  std::vector<double> memo(std::size_t{1} << c, std::nan(""));
  auto group_value = [&](const std::vector<std::size_t>& channels) {
    double total = 0;
    for (std::size_t r = 0; r < xi.rows; ++r) {
      std::vector<double> g;
      for (auto ch : channels) g.push_back(xi.at(r, ch));
      total += oracle::best_subset_sum(g, n);
    }
    return total;
  };
  std::function<double(std::uint32_t)> solve = [&](std::uint32_t remaining) -> double {
    if (remaining == 0) return 0.0;
    if (!std::isnan(memo[remaining])) return memo[remaining];
    const auto first = static_cast<std::size_t>(__builtin_ctz(remaining));
    std::vector<std::size_t> rest;
    for (std::size_t i = first + 1; i < c; ++i) {
      if (remaining & (1u << i)) rest.push_back(i);
    }
    double best = -1e300;
    std::vector<bool> pick(rest.size(), false);
    std::fill(pick.begin(), pick.begin() + static_cast<long>(m - 1), true);
    do {
      std::vector<std::size_t> group{first};
      std::uint32_t used = 1u << first;
      for (std::size_t i = 0; i < rest.size(); ++i) {
        if (pick[i]) {
          group.push_back(rest[i]);
          used |= 1u << rest[i];
        }
      }
      best = std::max(best, group_value(group) + solve(remaining & ~used));
    } while (std::prev_permutation(pick.begin(), pick.end()));
    return memo[remaining] = best;
  };
  return solve(static_cast<std::uint32_t>((1u << c) - 1));
}

}  // namespace

TEST_CASE("sparsity pattern parsing") {
  CHECK(SparsityPattern::parse("2:4") == SparsityPattern{2, 4});
  CHECK(SparsityPattern::parse("4:8") == SparsityPattern{4, 8});
  CHECK(SparsityPattern::parse("4:8").str() == "4:8");
  CHECK_THROWS_AS(SparsityPattern::parse("4:3"), ValidationError);
  CHECK_THROWS_AS(SparsityPattern::parse("4:4"), ValidationError);
  CHECK_THROWS_AS(SparsityPattern::parse("0:4"), ValidationError);
  CHECK_THROWS_AS(SparsityPattern::parse("2-4"), ValidationError);
  CHECK_THROWS_AS(SparsityPattern::parse("2:4x"), ValidationError);
}

TEST_CASE("retained objective of a single row") {
  const MatrixD xi(1, 4, std::vector<double>{4, 1, 3, 2});
  CHECK(retained_objective(xi, Permutation::identity(4).order, {2, 4}) == 7.0);
}

TEST_CASE("retained objective with one group of C keeping C-1 is total minus min") {
  const MatrixD xi = random_xi(3, 8, 5);
  double want = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    const auto row = xi.row(r);
    want += std::accumulate(row.begin(), row.end(), 0.0) - *std::min_element(row.begin(), row.end());
  }
  CHECK(retained_objective(xi, random_order(8, 1), {7, 8}) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("retained objective matches the subset-enumeration oracle") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const MatrixD xi = random_xi(4, 16, seed);
    const auto order = random_order(16, seed + 1000);
    CHECK(retained_objective(xi, order, {2, 4}) ==
          doctest::Approx(oracle::retained(to_dense(xi), order, 2, 4)).epsilon(1e-12));
  }
}

TEST_CASE("retained plus pruned mass is the total for every order") {
  const MatrixD xi = random_xi(5, 24, 8);
  const double total = std::accumulate(xi.data().begin(), xi.data().end(), 0.0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto order = random_order(24, seed);
    double pruned = 0;
    for (std::size_t r = 0; r < 5; ++r) {
      for (std::size_t g = 0; g < 24; g += 4) {
        std::vector<double> group;
        for (std::size_t s = 0; s < 4; ++s) group.push_back(-xi(r, order[g + s]));
        pruned -= oracle::best_subset_sum(group, 2);  // two smallest
      }
    }
    CHECK(retained_objective(xi, order, {2, 4}) + pruned == doctest::Approx(total).epsilon(1e-12));
  }
}

TEST_CASE("no-prune pattern makes every order equivalent") {
  const MatrixD xi = random_xi(3, 8, 3);
  const double base = retained_objective(xi, Permutation::identity(8).order, {4, 4});
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CHECK(retained_objective(xi, random_order(8, seed), {4, 4}) == doctest::Approx(base).epsilon(1e-12));
  }
  const Permutation p = local_block_shuffle(xi, Permutation::identity(8), {4, 4}, 8);
  CHECK(p.swaps.empty());
}

TEST_CASE("global naive shuffle deals sorted channels round-robin") {
  const MatrixD xi(1, 8, std::vector<double>{8, 7, 6, 5, 4, 3, 2, 1});
  const Permutation p = global_naive_shuffle(xi, {2, 4});
  CHECK(p.order == std::vector<std::size_t>{0, 2, 4, 6, 1, 3, 5, 7});
  CHECK(p.global_applied);
  CHECK_FALSE(p.local_applied);
}

TEST_CASE("global naive shuffle with equal means deals channels in index order") {
  const MatrixD xi(3, 8, 1.0);
  const Permutation p = global_naive_shuffle(xi, {2, 4});
  CHECK(p.order == std::vector<std::size_t>{0, 2, 4, 6, 1, 3, 5, 7});
  CHECK(p.objective_after == retained_objective(xi, Permutation::identity(8).order, {2, 4}));
}

TEST_CASE("global naive shuffle group membership follows mean rank") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const MatrixD xi = random_xi(6, 32, seed);
    const Permutation p = global_naive_shuffle(xi, {2, 4});
    REQUIRE(p.is_bijection());

    std::vector<double> mean(32, 0.0);
    for (std::size_t r = 0; r < 6; ++r) {
      for (std::size_t c = 0; c < 32; ++c) mean[c] += xi(r, c) / 6.0;
    }
    std::vector<std::size_t> rank_of(32);
    std::vector<std::size_t> by_mean(32);
    std::iota(by_mean.begin(), by_mean.end(), std::size_t{0});
    std::sort(by_mean.begin(), by_mean.end(), [&](auto a, auto b) { return mean[a] > mean[b]; });
    for (std::size_t i = 0; i < 32; ++i) rank_of[by_mean[i]] = i;

    for (std::size_t g = 0; g < 8; ++g) {
      std::vector<std::size_t> ranks;
      for (std::size_t s = 0; s < 4; ++s) ranks.push_back(rank_of[p.order[g * 4 + s]]);
      std::sort(ranks.begin(), ranks.end());
      CHECK(ranks == std::vector<std::size_t>{g, g + 8, g + 16, g + 24});
    }
  }
}

TEST_CASE("local block shuffle reaches the optimum on a small row") {
  const MatrixD xi(1, 8, std::vector<double>{10, 9, 1, 2, 8, 7, 3, 4});
  const Permutation p = local_block_shuffle(xi, Permutation::identity(8), {2, 4}, 8);
  CHECK(p.objective_after == doctest::Approx(oracle::exhaustive_optimum(to_dense(xi), 2, 4)));
}

TEST_CASE("local block shuffle improves a concentrated start to the optimum") {
  const MatrixD xi(1, 8, std::vector<double>{10, 9, 8, 7, 1, 2, 3, 4});
  const Permutation p = local_block_shuffle(xi, Permutation::identity(8), {2, 4}, 8);
  CHECK(p.objective_before == 19.0 + 7.0);
  CHECK(p.objective_after == oracle::exhaustive_optimum(to_dense(xi), 2, 4));
  CHECK(p.objective_after == 34.0);
  CHECK_FALSE(p.swaps.empty());
}

TEST_CASE("groups already holding their own top channels are a fixed point") {
  // every group keeps its two big values and nothing outside beats them
  const MatrixD xi(2, 8, std::vector<double>{9, 1, 8, 2, 7, 3, 6, 1,
                                             5, 5, 1, 1, 5, 5, 1, 1});
  const Permutation start = Permutation::identity(8);
  const Permutation p = local_block_shuffle(xi, start, {2, 4}, 8);
  CHECK(p.swaps.empty());
  CHECK(p.order == start.order);
  CHECK(p.objective_after == p.objective_before);
}

TEST_CASE("greedy never loses objective and stays close to the partition optimum") {
  double gap_sum = 0;
  std::size_t optimal = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const MatrixD xi = random_xi(4, 16, 500 + seed);
    const Permutation start = Permutation::identity(16);
    const Permutation p = local_block_shuffle(xi, start, {2, 4}, 16);
    REQUIRE(p.is_bijection());
    CHECK(p.objective_after >= p.objective_before);
    const double best = partition_optimum(to_dense(xi), 2, 4);
    CHECK(p.objective_after <= best + 1e-9);
    const double gap = (best - p.objective_after) / best;
    gap_sum += gap;
    if (gap < 1e-12) ++optimal;
  }
  MESSAGE("C=16 greedy: optimal in " << optimal << "/100, mean relative gap " << gap_sum / 100);
  CHECK(gap_sum / 100 < 0.01);
}

TEST_CASE("accepted swaps replay to a strictly increasing objective") {
  const MatrixD xi = random_xi(8, 256, 4242);
  const Permutation p = channel_shuffle(xi, {2, 4}, 64);
  REQUIRE(p.is_bijection());
  const Permutation global = global_naive_shuffle(xi, {2, 4});
  const double identity = retained_objective(xi, Permutation::identity(256).order, {2, 4});
  CHECK(p.objective_before == identity);
  std::vector<std::size_t> order = global.objective_after >= identity ? global.order : Permutation::identity(256).order;
  double previous = retained_objective(xi, order, {2, 4});
  CHECK(previous >= std::min(identity, global.objective_after));
  for (const auto& s : p.swaps) {
    std::swap(order[s.pos_a], order[s.pos_b]);
    const double now = retained_objective(xi, order, {2, 4});
    CHECK(now > previous);
    CHECK(s.objective == doctest::Approx(now).epsilon(1e-9));
    CHECK(s.pos_a / 64 == s.pos_b / 64);  // never crosses a block
    previous = now;
  }
  CHECK(order == p.order);
  CHECK(p.objective_after >= std::max(identity, global.objective_after));
  CHECK(p.local_applied);
}

TEST_CASE("channel shuffle on equal scores keeps the identity objective") {
  const MatrixD xi(4, 16, 0.5);
  const Permutation p = channel_shuffle(xi, {2, 4}, 16);
  CHECK(p.objective_after == p.objective_before);
  CHECK(p.swaps.empty());
}

TEST_CASE("concentrated high-mean channels are spread across groups") {
  // four strong channels with distinct means sit together in group 0
  MatrixD xi(3, 8);
  const double strong[4] = {10, 9, 8, 7};
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 4; ++c) xi(r, c) = strong[c] + 0.1 * static_cast<double>(r);
    for (std::size_t c = 4; c < 8; ++c) xi(r, c) = 0.5 + 0.1 * static_cast<double>(c);
  }
  const double identity = retained_objective(xi, Permutation::identity(8).order, {2, 4});
  const Permutation p = channel_shuffle(xi, {2, 4}, 8);
  CHECK(p.objective_after > identity);
  CHECK(p.objective_after == doctest::Approx(oracle::exhaustive_optimum(to_dense(xi), 2, 4)));
}

TEST_CASE("shuffle modes and the identity fallback") {
  const MatrixD xi = random_xi(4, 32, 77);
  const double identity = retained_objective(xi, Permutation::identity(32).order, {2, 4});
  const Permutation none = shuffle_channels(xi, {2, 4}, {ShuffleMode::none, 32, 0});
  CHECK(none.order == Permutation::identity(32).order);
  CHECK(none.objective_after == identity);
  const Permutation global = shuffle_channels(xi, {2, 4}, {ShuffleMode::global, 32, 0});
  CHECK(global.objective_after >= identity);
  const Permutation full = shuffle_channels(xi, {2, 4}, {ShuffleMode::full, 32, 0});
  CHECK(full.objective_after >= global.objective_after);

  // a layout where the round-robin deal is worse than the identity
  const MatrixD trap(1, 8, std::vector<double>{10, 10, 0, 0, 9, 9, 0, 0});
  const double trap_identity = retained_objective(trap, Permutation::identity(8).order, {2, 4});
  const Permutation g = global_naive_shuffle(trap, {2, 4});
  CHECK(g.objective_after <= trap_identity);
  const Permutation guarded = shuffle_channels(trap, {2, 4}, {ShuffleMode::global, 8, 0});
  CHECK(guarded.objective_after >= trap_identity);
}

TEST_CASE("order then inverse restores columns") {
  const MatrixD xi = random_xi(3, 12, 1);
  Permutation p;
  p.order = random_order(12, 9);
  const MatrixD back = permute_columns(permute_columns(xi, p.order), p.inverse());
  CHECK(back == xi);
  CHECK(unpermute_columns(permute_columns(xi, p.order), p.order) == xi);
}

TEST_CASE("shuffle errors") {
  const MatrixD xi = random_xi(2, 10, 1);
  CHECK_THROWS_AS(retained_objective(xi, Permutation::identity(10).order, {2, 4}), ValidationError);
  CHECK_THROWS_AS(global_naive_shuffle(xi, {2, 4}), ValidationError);
  const MatrixD ok = random_xi(2, 16, 1);
  CHECK_THROWS_AS(local_block_shuffle(ok, Permutation::identity(16), {2, 4}, 6), ValidationError);
  Permutation broken = Permutation::identity(16);
  broken.order[0] = 1;
  CHECK_THROWS_AS(local_block_shuffle(ok, broken, {2, 4}, 16), ValidationError);
}

TEST_CASE("a short final block is searched") {
  const MatrixD xi = random_xi(4, 24, 31);
  const Permutation p = local_block_shuffle(xi, Permutation::identity(24), {2, 4}, 16);
  CHECK(p.is_bijection());
  CHECK(p.objective_after >= p.objective_before);
  for (const auto& s : p.swaps) CHECK(s.pos_a / 16 == s.pos_b / 16);
}
