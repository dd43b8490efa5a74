#include "esparse/pruner.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/core.h>

#include "json.hpp"

namespace esparse {
namespace fs = std::filesystem;

Mask nm_mask(const MatrixD& scores_permuted, const SparsityPattern& pattern) {
  pattern.validate();
  const std::size_t m = pattern.m_group;
  if (scores_permuted.cols() % m != 0) {
    throw ValidationError(fmt::format("column count {} is not divisible by group size {}", scores_permuted.cols(), m));
  }
  Mask mask(scores_permuted.rows(), scores_permuted.cols(), 0);
  std::vector<std::size_t> slots(m);
  for (std::size_t r = 0; r < scores_permuted.rows(); ++r) {
    const auto row = scores_permuted.row(r);
    auto out = mask.row(r);
    for (std::size_t g = 0; g < row.size(); g += m) {
      std::iota(slots.begin(), slots.end(), g);
      std::partial_sort(slots.begin(), slots.begin() + static_cast<std::ptrdiff_t>(pattern.n_keep), slots.end(),
                        [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
      for (std::size_t i = 0; i < pattern.n_keep; ++i) out[slots[i]] = 1;
    }
  }
  return mask;
}

double reconstruction_error(const MatrixF& weight, const MatrixF& pruned, const MatrixF& activations) {
  if (weight.rows() != pruned.rows() || weight.cols() != pruned.cols()) {
    throw ShapeError("weight and pruned weight shapes differ");
  }
  if (activations.cols() != weight.cols()) {
    throw ShapeError(fmt::format("activations have {} channels, weight expects {}", activations.cols(), weight.cols()));
  }
  // Kept entries are copies, so the difference is exact and holds only the pruned weights.
  MatrixF diff(weight.rows(), weight.cols());
  for (std::size_t i = 0; i < weight.size(); ++i) diff.data()[i] = weight.data()[i] - pruned.data()[i];

  double sum_sq = 0.0;
  for (std::size_t t = 0; t < activations.rows(); ++t) {
    const auto x = activations.row(t);
    for (std::size_t r = 0; r < diff.rows(); ++r) {
      const auto d = diff.row(r);
      float acc = 0.0f;
      for (std::size_t c = 0; c < d.size(); ++c) acc += x[c] * d[c];
      sum_sq += static_cast<double>(acc) * static_cast<double>(acc);
    }
  }
  return std::sqrt(sum_sq);
}

PruneResult prune_layer(const LayerBundle& bundle, const PruneConfig& config) {
  const SparsityPattern& pattern = config.pattern;
  pattern.validate();
  if (bundle.in_channels() % pattern.m_group != 0) {
    throw ValidationError(fmt::format("layer '{}': {} input channels are not divisible by group size {}",
                                      bundle.layer_id, bundle.in_channels(), pattern.m_group));
  }

  const MatrixF weight = bundle.weight.to_matrix();
  MetricMatrix metric;
  if (config.metric == MetricKind::magnitude) {
    metric = magnitude_metric(weight);
  } else {
    const ChannelStats stats = compute_stats(bundle.calib_activations, config.bins);
    metric = config.metric == MetricKind::esparse ? esparse_metric(weight, stats, config.alpha)
                                                  : wanda_metric(weight, stats);
  }

  PruneResult result;
  result.layer_id = bundle.layer_id;
  result.metric = config.metric;
  result.pattern = pattern;
  result.permutation = shuffle_channels(metric.scores, pattern, config.shuffle);

  const MatrixD permuted = permute_columns(metric.scores, result.permutation.order);
  result.mask_permuted = nm_mask(permuted, pattern);
  result.mask = unpermute_columns(result.mask_permuted, result.permutation.order);

  double total = 0.0;
  double retained = 0.0;
  for (std::size_t i = 0; i < permuted.size(); ++i) {
    total += permuted.data()[i];
    if (result.mask_permuted.data()[i]) retained += permuted.data()[i];
  }
  result.retained_metric_fraction = total > 0.0 ? retained / total : 1.0;

  const auto& mask = result.mask.storage();
  if (bundle.weight.dtype() == DType::f16) {
    const auto src = bundle.weight.f16_bits();
    std::vector<std::uint16_t> bits(src.size());
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = mask[i] ? src[i] : std::uint16_t{0};
    result.pruned_weight = Tensor::from_f16_bits(bundle.weight.shape(), std::move(bits));
  } else {
    const auto src = bundle.weight.f32();
    std::vector<float> values(src.size());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = mask[i] ? src[i] : 0.0f;
    result.pruned_weight = Tensor::from_f32(bundle.weight.shape(), std::move(values));
  }

  result.recon_error =
      reconstruction_error(weight, result.pruned_weight.to_matrix(), bundle.calib_activations.to_matrix());
  return result;
}

void write_permutation_json(const Permutation& permutation, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
  out << nlohmann::json(permutation.order).dump() << '\n';
}

std::vector<std::size_t> read_permutation_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open '{}' for reading", path.string()));
  try {
    auto order = nlohmann::json::parse(in).get<std::vector<std::size_t>>();
    Permutation p;
    p.order = order;
    if (!p.is_bijection()) throw ValidationError(fmt::format("{}: permutation is not a bijection", path.string()));
    return order;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("{}: expected a JSON array of channel indices: {}", path.string(), e.what()));
  }
}

void write_summary_csv(const std::vector<PruneResult>& results, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
  out << "layer_id,metric,pattern,recon_error,retained_fraction,swaps_applied\n";
  for (const auto& r : results) {
    out << fmt::format("{},{},{},{:.9g},{:.9g},{}\n", r.layer_id, to_string(r.metric), r.pattern.str(), r.recon_error,
                       r.retained_metric_fraction, r.permutation.swaps.size());
  }
}

std::vector<SummaryRow> read_summary_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open '{}' for reading", path.string()));
  std::string line;
  std::getline(in, line);
  if (line != "layer_id,metric,pattern,recon_error,retained_fraction,swaps_applied") {
    throw FormatError(fmt::format("{}: unexpected summary header", path.string()));
  }
  std::vector<SummaryRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    SummaryRow row;
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 6) throw FormatError(fmt::format("{}: malformed row '{}'", path.string(), line));
    row.layer_id = fields[0];
    row.metric = fields[1];
    row.pattern = fields[2];
    row.recon_error = std::stod(fields[3]);
    row.retained_fraction = std::stod(fields[4]);
    row.swaps_applied = std::stoull(fields[5]);
    rows.push_back(std::move(row));
  }
  return rows;
}

ModelReport prune_model(const Manifest& manifest, const PruneConfig& config, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  ModelReport report;
  std::vector<std::string> completed;
  for (const auto& entry : manifest.layers) {
    try {
      const LayerBundle bundle = load_bundle(manifest, entry.layer_id);
      PruneResult result = prune_layer(bundle, config);

      std::vector<float> mask_values(result.mask_permuted.size());
      std::transform(result.mask_permuted.data().begin(), result.mask_permuted.data().end(), mask_values.begin(),
                     [](std::uint8_t v) { return v ? 1.0f : 0.0f; });
      write_tensor(result.pruned_weight, out_dir / (entry.layer_id + ".weight.espt"));
      write_tensor(Tensor::from_f32(result.pruned_weight.shape(), std::move(mask_values)),
                   out_dir / (entry.layer_id + ".mask.espt"));
      write_permutation_json(result.permutation, out_dir / (entry.layer_id + ".perm.json"));

      report.layers.push_back(std::move(result));
      completed.push_back(entry.layer_id);
    } catch (const Error& e) {
      write_summary_csv(report.layers, out_dir / "summary.csv");
      throw PruneModelError(fmt::format("layer '{}': {}", entry.layer_id, e.what()), completed);
    }
  }
  write_summary_csv(report.layers, out_dir / "summary.csv");

  for (const auto& r : report.layers) {
    report.total_recon_error += r.recon_error;
    report.mean_retained_fraction += r.retained_metric_fraction;
    report.total_swaps += r.permutation.swaps.size();
  }
  if (!report.layers.empty()) report.mean_retained_fraction /= static_cast<double>(report.layers.size());
  return report;
}

}  // namespace esparse
