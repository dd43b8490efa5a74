#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "esparse/matrix.hpp"
#include "esparse/metrics.hpp"

namespace esparse {

/// Keep `n_keep` of every `m_group` consecutive channels.
struct SparsityPattern {
  std::size_t n_keep = 2;
  std::size_t m_group = 4;

  /// Parses "N:M". Requires 1 <= N < M.
  static SparsityPattern parse(std::string_view text);
  std::string str() const;
  /// Accepts the degenerate N == M (no pruning) used for debugging.
  void validate() const;
  bool prunes() const noexcept { return n_keep < m_group; }

  friend bool operator==(const SparsityPattern&, const SparsityPattern&) = default;
};

/// One accepted greedy move: positions are absolute indices in the permuted
/// channel order at the time of the swap.
struct SwapRecord {
  std::size_t pos_a = 0;
  std::size_t pos_b = 0;
  double delta = 0.0;
  double objective = 0.0;  // retained objective after the swap
};

/// order[k] is the original channel placed at position k.
struct Permutation {
  std::vector<std::size_t> order;
  bool global_applied = false;
  bool local_applied = false;
  double objective_before = 0.0;
  double objective_after = 0.0;
  std::vector<SwapRecord> swaps;

  static Permutation identity(std::size_t channels);
  std::vector<std::size_t> inverse() const;
  bool is_bijection() const;
};

enum class ShuffleMode { none, global, full };

std::string_view to_string(ShuffleMode mode);
ShuffleMode parse_shuffle_mode(std::string_view text);

inline constexpr std::size_t kDefaultBlockSize = 256;

struct ShuffleConfig {
  ShuffleMode mode = ShuffleMode::full;
  std::size_t block_size = kDefaultBlockSize;
  /// Swap cap per block; 0 selects 10 * block_size.
  std::size_t max_iters = 0;
};

/// Sum over rows and channel groups of the n_keep largest scores once the
/// columns are reordered by `order`.
double retained_objective(const MatrixD& xi, std::span<const std::size_t> order, const SparsityPattern& pattern);

/// Sort channels by mean score (descending, ties to lower index) and deal
/// them round-robin across the C / m_group groups.
Permutation global_naive_shuffle(const MatrixD& xi, const SparsityPattern& pattern);

/// Greedy best-improvement pairwise swaps inside consecutive blocks of
/// `block_size` channels of the order given by `start`.
Permutation local_block_shuffle(const MatrixD& xi, const Permutation& start, const SparsityPattern& pattern,
                                std::size_t block_size = kDefaultBlockSize, std::size_t max_iters = 0);

/// Global naive shuffle followed by local block shuffle. Falls back to the
/// identity as the local-search start when the global order loses objective.
Permutation channel_shuffle(const MatrixD& xi, const SparsityPattern& pattern,
                            std::size_t block_size = kDefaultBlockSize, std::size_t max_iters = 0);

/// Dispatch on ShuffleMode. `global` keeps the identity fallback.
Permutation shuffle_channels(const MatrixD& xi, const SparsityPattern& pattern, const ShuffleConfig& config);

}  // namespace esparse
