#include "esparse/shuffle.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <future>
#include <numeric>

#include <fmt/core.h>

namespace esparse {
namespace {

constexpr double kRelativeImprovement = 1e-9;

void check_divisible(std::size_t channels, const SparsityPattern& pattern) {
  pattern.validate();
  if (channels == 0 || channels % pattern.m_group != 0) {
    throw ValidationError(
        fmt::format("channel count {} is not divisible by group size {}", channels, pattern.m_group));
  }
}

void check_order(std::span<const std::size_t> order, std::size_t channels) {
  if (order.size() != channels) {
    throw ShapeError(fmt::format("permutation has {} entries for {} channels", order.size(), channels));
  }
  std::vector<char> seen(channels, 0);
  for (auto idx : order) {
    if (idx >= channels || seen[idx]) throw ValidationError("permutation is not a bijection");
    seen[idx] = 1;
  }
}

// Sum of the n largest values in `group`; reorders `group`.
double top_sum(std::span<double> group, std::size_t n) {
  std::nth_element(group.begin(), group.begin() + static_cast<std::ptrdiff_t>(n - 1), group.end(),
                   std::greater<>());
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += group[i];
  return s;
}

// Greedy pairwise-swap search over one block of channels. Scores are held
// channel-major so a swap is a column exchange. For every (group, row) we keep
// the top-n sum, the n-th and (n+1)-th largest values and which slots are in
// the top set; that makes the objective change of replacing one slot O(1).
class BlockSearch {
 public:
  BlockSearch(const MatrixD& xi, std::span<const std::size_t> order, std::size_t begin, std::size_t size,
              const SparsityPattern& pattern)
      : rows_(xi.rows()), size_(size), n_(pattern.n_keep), m_(pattern.m_group), groups_(size / pattern.m_group) {
    values_.resize(size_ * rows_);
    for (std::size_t k = 0; k < size_; ++k) {
      const std::size_t channel = order[begin + k];
      for (std::size_t r = 0; r < rows_; ++r) values_[k * rows_ + r] = xi(r, channel);
    }
    summary_.resize(groups_ * rows_);
    for (std::size_t g = 0; g < groups_; ++g) summarize(g);
    deltas_.assign(size_ * size_, 0.0);
    for (std::size_t a = 0; a < size_; ++a) {
      for (std::size_t b = a + 1; b < size_; ++b) deltas_[a * size_ + b] = pair_delta(a, b);
    }
  }

  double objective() const {
    double total = 0.0;
    for (const auto& s : summary_) total += s.sum;
    return total;
  }

  // Largest strictly improving swap, or false when none clears the threshold.
  bool best_swap(double threshold, std::size_t& a_out, std::size_t& b_out, double& delta_out) const {
    double best = threshold;
    bool found = false;
    for (std::size_t a = 0; a < size_; ++a) {
      for (std::size_t b = (a / m_ + 1) * m_; b < size_; ++b) {
        const double d = deltas_[a * size_ + b];
        if (d > best) {
          best = d;
          a_out = a;
          b_out = b;
          found = true;
        }
      }
    }
    delta_out = best;
    return found;
  }

  void apply_swap(std::size_t a, std::size_t b) {
    std::swap_ranges(values_.begin() + static_cast<std::ptrdiff_t>(a * rows_),
                     values_.begin() + static_cast<std::ptrdiff_t>((a + 1) * rows_),
                     values_.begin() + static_cast<std::ptrdiff_t>(b * rows_));
    const std::size_t ga = a / m_;
    const std::size_t gb = b / m_;
    summarize(ga);
    summarize(gb);
    for (std::size_t g : {ga, gb}) {
      for (std::size_t k = g * m_; k < (g + 1) * m_; ++k) {
        for (std::size_t other = 0; other < size_; ++other) {
          if (other / m_ == k / m_) continue;
          const std::size_t lo = std::min(k, other);
          const std::size_t hi = std::max(k, other);
          deltas_[lo * size_ + hi] = pair_delta(lo, hi);
        }
      }
    }
  }

 private:
  struct GroupRow {
    double sum = 0.0;
    double nth = 0.0;   // n-th largest
    double next = 0.0;  // (n+1)-th largest, when the group prunes anything
    std::uint32_t top = 0;
  };

  double value(std::size_t slot, std::size_t r) const { return values_[slot * rows_ + r]; }

  void summarize(std::size_t g) {
    std::vector<std::size_t> slots(m_);
    for (std::size_t r = 0; r < rows_; ++r) {
      std::iota(slots.begin(), slots.end(), g * m_);
      std::sort(slots.begin(), slots.end(), [&](std::size_t x, std::size_t y) {
        const double vx = value(x, r);
        const double vy = value(y, r);
        return vx > vy || (vx == vy && x < y);
      });
      GroupRow s;
      for (std::size_t i = 0; i < n_; ++i) {
        s.sum += value(slots[i], r);
        s.top |= 1u << (slots[i] - g * m_);
      }
      s.nth = value(slots[n_ - 1], r);
      s.next = n_ < m_ ? value(slots[n_], r) : 0.0;
      summary_[g * rows_ + r] = s;
    }
  }

  // Top-n sum of group g after the value in `slot` is replaced by v.
  double replaced_sum(const GroupRow& s, std::size_t local_slot, double old_value, double v) const {
    double sum = s.sum;
    double floor_value = s.nth;
    if (s.top & (1u << local_slot)) {
      sum = sum - old_value + s.next;
      floor_value = s.next;
    }
    return v > floor_value ? sum - floor_value + v : sum;
  }

  double pair_delta(std::size_t a, std::size_t b) const {
    const std::size_t ga = a / m_;
    const std::size_t gb = b / m_;
    if (ga == gb) return 0.0;
    const std::size_t sa = a - ga * m_;
    const std::size_t sb = b - gb * m_;
    double delta = 0.0;
    for (std::size_t r = 0; r < rows_; ++r) {
      const GroupRow& A = summary_[ga * rows_ + r];
      const GroupRow& B = summary_[gb * rows_ + r];
      const double va = value(a, r);
      const double vb = value(b, r);
      delta += replaced_sum(A, sa, va, vb) - A.sum + replaced_sum(B, sb, vb, va) - B.sum;
    }
    return delta;
  }

  std::size_t rows_;
  std::size_t size_;
  std::size_t n_;
  std::size_t m_;
  std::size_t groups_;
  std::vector<double> values_;
  std::vector<GroupRow> summary_;
  std::vector<double> deltas_;
};

struct BlockOutcome {
  std::vector<std::pair<std::size_t, std::size_t>> swaps;  // block-local slots
  std::vector<double> deltas;
};

BlockOutcome search_block(const MatrixD& xi, std::span<const std::size_t> order, std::size_t begin,
                          std::size_t size, const SparsityPattern& pattern, std::size_t max_iters) {
  BlockOutcome outcome;
  BlockSearch search(xi, order, begin, size, pattern);
  double block_objective = search.objective();
  for (std::size_t it = 0; it < max_iters; ++it) {
    std::size_t a = 0;
    std::size_t b = 0;
    double delta = 0.0;
    if (!search.best_swap(kRelativeImprovement * std::abs(block_objective), a, b, delta)) break;
    search.apply_swap(a, b);
    block_objective += delta;
    outcome.swaps.emplace_back(a, b);
    outcome.deltas.push_back(delta);
  }
  return outcome;
}

}  // namespace

SparsityPattern SparsityPattern::parse(std::string_view text) {
  const auto colon = text.find(':');
  SparsityPattern p;
  auto parse_int = [&](std::string_view part, std::size_t& out) {
    const auto* end = part.data() + part.size();
    const auto res = std::from_chars(part.data(), end, out);
    return res.ec == std::errc{} && res.ptr == end && !part.empty();
  };
  if (colon == std::string_view::npos || !parse_int(text.substr(0, colon), p.n_keep) ||
      !parse_int(text.substr(colon + 1), p.m_group)) {
    throw ValidationError(fmt::format("invalid sparsity pattern '{}', expected N:M", text));
  }
  if (p.n_keep < 1 || p.n_keep >= p.m_group) {
    throw ValidationError(fmt::format("invalid sparsity pattern '{}': need 1 <= N < M", text));
  }
  p.validate();
  return p;
}

std::string SparsityPattern::str() const { return fmt::format("{}:{}", n_keep, m_group); }

void SparsityPattern::validate() const {
  if (n_keep < 1 || n_keep > m_group) {
    throw ValidationError(fmt::format("invalid sparsity pattern {}:{}", n_keep, m_group));
  }
  if (m_group > 32) throw ValidationError(fmt::format("group size {} exceeds the supported maximum of 32", m_group));
}

Permutation Permutation::identity(std::size_t channels) {
  Permutation p;
  p.order.resize(channels);
  std::iota(p.order.begin(), p.order.end(), std::size_t{0});
  return p;
}

std::vector<std::size_t> Permutation::inverse() const {
  std::vector<std::size_t> inv(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) inv[order[k]] = k;
  return inv;
}

bool Permutation::is_bijection() const {
  std::vector<std::size_t> sorted = order;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    if (sorted[k] != k) return false;
  }
  return true;
}

std::string_view to_string(ShuffleMode mode) {
  switch (mode) {
    case ShuffleMode::none: return "none";
    case ShuffleMode::global: return "global";
    case ShuffleMode::full: return "full";
  }
  return "unknown";
}

ShuffleMode parse_shuffle_mode(std::string_view text) {
  if (text == "none") return ShuffleMode::none;
  if (text == "global") return ShuffleMode::global;
  if (text == "full") return ShuffleMode::full;
  throw ValidationError(fmt::format("unknown shuffle mode '{}' (expected none, global or full)", text));
}

double retained_objective(const MatrixD& xi, std::span<const std::size_t> order, const SparsityPattern& pattern) {
  check_divisible(xi.cols(), pattern);
  check_order(order, xi.cols());
  const std::size_t m = pattern.m_group;
  std::vector<double> group(m);
  double total = 0.0;
  for (std::size_t r = 0; r < xi.rows(); ++r) {
    const auto row = xi.row(r);
    for (std::size_t g = 0; g < xi.cols(); g += m) {
      for (std::size_t s = 0; s < m; ++s) group[s] = row[order[g + s]];
      total += top_sum(group, pattern.n_keep);
    }
  }
  return total;
}

Permutation global_naive_shuffle(const MatrixD& xi, const SparsityPattern& pattern) {
  const std::size_t channels = xi.cols();
  check_divisible(channels, pattern);

  std::vector<double> mean(channels, 0.0);
  for (std::size_t r = 0; r < xi.rows(); ++r) {
    const auto row = xi.row(r);
    for (std::size_t c = 0; c < channels; ++c) mean[c] += row[c];
  }
  for (auto& v : mean) v /= static_cast<double>(std::max<std::size_t>(xi.rows(), 1));

  std::vector<std::size_t> sorted(channels);
  std::iota(sorted.begin(), sorted.end(), std::size_t{0});
  std::stable_sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) { return mean[a] > mean[b]; });

  const std::size_t groups = channels / pattern.m_group;
  Permutation p;
  p.order.resize(channels);
  for (std::size_t i = 0; i < channels; ++i) {
    p.order[(i % groups) * pattern.m_group + i / groups] = sorted[i];
  }
  p.global_applied = true;
  p.objective_before = retained_objective(xi, Permutation::identity(channels).order, pattern);
  p.objective_after = retained_objective(xi, p.order, pattern);
  return p;
}

Permutation local_block_shuffle(const MatrixD& xi, const Permutation& start, const SparsityPattern& pattern,
                                std::size_t block_size, std::size_t max_iters) {
  const std::size_t channels = xi.cols();
  check_divisible(channels, pattern);
  check_order(start.order, channels);
  if (block_size == 0 || block_size % pattern.m_group != 0) {
    throw ValidationError(
        fmt::format("block size {} is not a positive multiple of group size {}", block_size, pattern.m_group));
  }
  if (max_iters == 0) max_iters = 10 * block_size;

  Permutation result = start;
  result.local_applied = true;
  result.swaps.clear();
  result.objective_before = retained_objective(xi, start.order, pattern);

  if (pattern.prunes()) {
    // blocks are independent; search them concurrently, merge in block order
    std::vector<std::future<BlockOutcome>> pending;
    std::vector<std::size_t> starts;
    for (std::size_t begin = 0; begin < channels; begin += block_size) {
      const std::size_t size = std::min(block_size, channels - begin);
      starts.push_back(begin);
      pending.push_back(std::async(std::launch::async, search_block, std::cref(xi),
                                   std::span<const std::size_t>(start.order), begin, size, std::cref(pattern),
                                   max_iters));
    }
    double objective = result.objective_before;
    for (std::size_t i = 0; i < pending.size(); ++i) {
      const BlockOutcome outcome = pending[i].get();
      for (std::size_t s = 0; s < outcome.swaps.size(); ++s) {
        const std::size_t a = starts[i] + outcome.swaps[s].first;
        const std::size_t b = starts[i] + outcome.swaps[s].second;
        std::swap(result.order[a], result.order[b]);
        objective += outcome.deltas[s];
        result.swaps.push_back({a, b, outcome.deltas[s], objective});
      }
    }
  }

  result.objective_after = retained_objective(xi, result.order, pattern);
  return result;
}

Permutation channel_shuffle(const MatrixD& xi, const SparsityPattern& pattern, std::size_t block_size,
                            std::size_t max_iters) {
  Permutation global = global_naive_shuffle(xi, pattern);
  const double identity_objective = global.objective_before;
  Permutation start = global.objective_after < identity_objective ? Permutation::identity(xi.cols()) : global;

  Permutation result = local_block_shuffle(xi, start, pattern, block_size, max_iters);
  result.global_applied = start.global_applied;
  result.objective_before = identity_objective;
  return result;
}

Permutation shuffle_channels(const MatrixD& xi, const SparsityPattern& pattern, const ShuffleConfig& config) {
  switch (config.mode) {
    case ShuffleMode::none: {
      Permutation p = Permutation::identity(xi.cols());
      p.objective_before = p.objective_after = retained_objective(xi, p.order, pattern);
      return p;
    }
    case ShuffleMode::global: {
      Permutation global = global_naive_shuffle(xi, pattern);
      if (global.objective_after < global.objective_before) {
        Permutation p = Permutation::identity(xi.cols());
        p.objective_before = p.objective_after = global.objective_before;
        return p;
      }
      return global;
    }
    case ShuffleMode::full:
      return channel_shuffle(xi, pattern, config.block_size, config.max_iters);
  }
  throw ValidationError("unknown shuffle mode");
}

}  // namespace esparse
