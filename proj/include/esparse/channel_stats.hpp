#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <vector>

#include "esparse/matrix.hpp"
#include "esparse/tensor_store.hpp"

namespace esparse {

inline constexpr std::size_t kDefaultBins = 100;

/// Per-channel information richness (histogram entropy, nats) and amplitude
/// (L2 norm) over a calibration set.
struct ChannelStats {
  std::size_t bins = kDefaultBins;
  std::vector<double> entropy;
  std::vector<double> amplitude;
  std::vector<float> min;
  std::vector<float> max;

  std::size_t channel_count() const noexcept { return entropy.size(); }
};

/// Bin of `value` among `bins` equal-width bins over [lo, hi]. The upper edge
/// belongs to the last bin; a degenerate range maps everything to bin 0.
/// Bin k covers [lo + (hi-lo)*k/bins, lo + (hi-lo)*(k+1)/bins).
std::size_t bin_index(float value, float lo, float hi, std::size_t bins) noexcept;

/// Probability of each of `bins` equal-width bins spanning [min(x), max(x)].
std::vector<double> channel_histogram(std::span<const float> values, std::size_t bins);

/// Shannon entropy in nats; zero-probability bins contribute nothing.
double entropy(std::span<const double> probabilities);

/// L2 norm with a double accumulator.
double amplitude(std::span<const float> values);

/// Statistics of every column of the token-major activations [T, C].
ChannelStats compute_stats(const MatrixF& activations, std::size_t bins = kDefaultBins);
ChannelStats compute_stats(const Tensor& activations, std::size_t bins = kDefaultBins);

/// CSV with columns channel,entropy,amplitude,min,max.
void write_stats_csv(const ChannelStats& stats, std::ostream& out);

}  // namespace esparse
