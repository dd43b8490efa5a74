#include "esparse/metrics.hpp"

#include <cmath>

#include <fmt/core.h>

namespace esparse {
namespace {

void check_channels(const MatrixF& weight, const ChannelStats& stats) {
  if (stats.channel_count() != weight.cols()) {
    throw ShapeError(fmt::format("weight has {} input channels but statistics cover {}", weight.cols(),
                                 stats.channel_count()));
  }
}

template <typename ChannelWeight>
MatrixD scale_abs(const MatrixF& weight, ChannelWeight&& channel_weight) {
  MatrixD scores(weight.rows(), weight.cols());
  for (std::size_t r = 0; r < weight.rows(); ++r) {
    const auto w = weight.row(r);
    auto s = scores.row(r);
    for (std::size_t c = 0; c < weight.cols(); ++c) {
      s[c] = std::abs(static_cast<double>(w[c])) * channel_weight(c);
    }
  }
  return scores;
}

}  // namespace

std::string_view to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::esparse: return "esparse";
    case MetricKind::wanda: return "wanda";
    case MetricKind::magnitude: return "magnitude";
  }
  return "unknown";
}

MetricKind parse_metric_kind(std::string_view text) {
  if (text == "esparse") return MetricKind::esparse;
  if (text == "wanda") return MetricKind::wanda;
  if (text == "magnitude") return MetricKind::magnitude;
  throw ValidationError(fmt::format("unknown metric '{}' (expected esparse, wanda or magnitude)", text));
}

MetricMatrix esparse_metric(const MatrixF& weight, const ChannelStats& stats, double alpha) {
  check_channels(weight, stats);
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ValidationError(fmt::format("alpha must be >= 0, got {}", alpha));
  std::vector<double> channel_weight(weight.cols());
  for (std::size_t c = 0; c < weight.cols(); ++c) channel_weight[c] = stats.entropy[c] + alpha * stats.amplitude[c];
  return {MetricKind::esparse, alpha, scale_abs(weight, [&](std::size_t c) { return channel_weight[c]; })};
}

MetricMatrix wanda_metric(const MatrixF& weight, const ChannelStats& stats) {
  check_channels(weight, stats);
  return {MetricKind::wanda, 0.0, scale_abs(weight, [&](std::size_t c) { return stats.amplitude[c]; })};
}

MetricMatrix magnitude_metric(const MatrixF& weight) {
  return {MetricKind::magnitude, 0.0, scale_abs(weight, [](std::size_t) { return 1.0; })};
}

}  // namespace esparse
