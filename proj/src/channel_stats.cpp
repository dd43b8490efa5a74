#include "esparse/channel_stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/core.h>

namespace esparse {
namespace {

double bin_edge(double lo, double range, std::size_t k, std::size_t bins) noexcept {
  return lo + range * static_cast<double>(k) / static_cast<double>(bins);
}

void check_bins(std::size_t bins) {
  if (bins < 2) throw ValidationError(fmt::format("bin count must be at least 2, got {}", bins));
}

std::vector<double> normalize(const std::vector<std::uint64_t>& counts, std::size_t total) {
  std::vector<double> p(counts.size());
  const auto n = static_cast<double>(total);
  for (std::size_t k = 0; k < counts.size(); ++k) p[k] = static_cast<double>(counts[k]) / n;
  return p;
}

}  // namespace

std::size_t bin_index(float value, float lo, float hi, std::size_t bins) noexcept {
  if (!(hi > lo)) return 0;
  const double dlo = lo;
  const double range = static_cast<double>(hi) - dlo;
  const double v = value;
  const double guess = std::floor((v - dlo) / range * static_cast<double>(bins));
  std::size_t idx = guess <= 0.0 ? 0 : std::min(static_cast<std::size_t>(guess), bins - 1);
  // the closed-form guess can be off by one near an edge; settle on the edge test
  while (idx + 1 < bins && v >= bin_edge(dlo, range, idx + 1, bins)) ++idx;
  while (idx > 0 && v < bin_edge(dlo, range, idx, bins)) --idx;
  return idx;
}

std::vector<double> channel_histogram(std::span<const float> values, std::size_t bins) {
  check_bins(bins);
  if (values.empty()) throw ValidationError("histogram of an empty channel");
  float lo = std::numeric_limits<float>::infinity();
  float hi = -std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) throw ValidationError(fmt::format("non-finite value at token {}", i));
    lo = std::min(lo, values[i]);
    hi = std::max(hi, values[i]);
  }
  std::vector<std::uint64_t> counts(bins, 0);
  for (float v : values) ++counts[bin_index(v, lo, hi, bins)];
  return normalize(counts, values.size());
}

double entropy(std::span<const double> probabilities) {
  if (probabilities.empty()) throw ValidationError("entropy of an empty distribution");
  double total = 0.0;
  for (std::size_t k = 0; k < probabilities.size(); ++k) {
    if (!(probabilities[k] >= 0.0)) {
      throw ValidationError(fmt::format("negative probability {} at bin {}", probabilities[k], k));
    }
    total += probabilities[k];
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError(fmt::format("probabilities sum to {}, not 1", total));

  double h = 0.0;
  for (double p : probabilities) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::clamp(h, 0.0, std::log(static_cast<double>(probabilities.size())));
}

double amplitude(std::span<const float> values) {
  double sum_sq = 0.0;
  for (float v : values) sum_sq += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(sum_sq);
}

ChannelStats compute_stats(const MatrixF& activations, std::size_t bins) {
  check_bins(bins);
  const std::size_t tokens = activations.rows();
  const std::size_t channels = activations.cols();
  if (tokens == 0 || channels == 0) throw ValidationError("activations must hold at least one token and channel");

  ChannelStats stats;
  stats.bins = bins;
  stats.min.assign(channels, std::numeric_limits<float>::infinity());
  stats.max.assign(channels, -std::numeric_limits<float>::infinity());
  std::vector<double> sum_sq(channels, 0.0);

  for (std::size_t t = 0; t < tokens; ++t) {
    const auto row = activations.row(t);
    for (std::size_t c = 0; c < channels; ++c) {
      const float v = row[c];
      if (!std::isfinite(v)) throw ValidationError(fmt::format("non-finite activation at token {}, channel {}", t, c));
      stats.min[c] = std::min(stats.min[c], v);
      stats.max[c] = std::max(stats.max[c], v);
      sum_sq[c] += static_cast<double>(v) * static_cast<double>(v);
    }
  }

  std::vector<std::uint64_t> counts(channels * bins, 0);
  for (std::size_t t = 0; t < tokens; ++t) {
    const auto row = activations.row(t);
    for (std::size_t c = 0; c < channels; ++c) {
      ++counts[c * bins + bin_index(row[c], stats.min[c], stats.max[c], bins)];
    }
  }

  stats.entropy.resize(channels);
  stats.amplitude.resize(channels);
  std::vector<std::uint64_t> channel_counts(bins);
  for (std::size_t c = 0; c < channels; ++c) {
    std::copy_n(counts.begin() + static_cast<std::ptrdiff_t>(c * bins), bins, channel_counts.begin());
    stats.entropy[c] = entropy(normalize(channel_counts, tokens));
    stats.amplitude[c] = std::sqrt(sum_sq[c]);
  }
  return stats;
}

ChannelStats compute_stats(const Tensor& activations, std::size_t bins) {
  return compute_stats(activations.to_matrix(), bins);
}

void write_stats_csv(const ChannelStats& stats, std::ostream& out) {
  out << "channel,entropy,amplitude,min,max\n";
  for (std::size_t c = 0; c < stats.channel_count(); ++c) {
    out << fmt::format("{},{:.17g},{:.17g},{:.9g},{:.9g}\n", c, stats.entropy[c], stats.amplitude[c], stats.min[c],
                       stats.max[c]);
  }
}

}  // namespace esparse
