#pragma once

#include <string_view>

#include "esparse/channel_stats.hpp"
#include "esparse/matrix.hpp"

namespace esparse {

enum class MetricKind { esparse, wanda, magnitude };

std::string_view to_string(MetricKind kind);
/// Accepts "esparse", "wanda", "magnitude".
MetricKind parse_metric_kind(std::string_view text);

/// Balances entropy against amplitude in the combined score.
inline constexpr double kDefaultAlpha = 70.0;

/// Element importance scores, same shape as the weight [C_out, C_in].
struct MetricMatrix {
  MetricKind kind = MetricKind::esparse;
  double alpha = 0.0;
  MatrixD scores;
};

/// |W[r][c]| * (IR_c + alpha * AM_c), channels are the columns of W.
MetricMatrix esparse_metric(const MatrixF& weight, const ChannelStats& stats, double alpha = kDefaultAlpha);

/// |W[r][c]| * AM_c
MetricMatrix wanda_metric(const MatrixF& weight, const ChannelStats& stats);

/// |W[r][c]|
MetricMatrix magnitude_metric(const MatrixF& weight);

}  // namespace esparse
