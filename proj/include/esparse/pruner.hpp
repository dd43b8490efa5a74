#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "esparse/channel_stats.hpp"
#include "esparse/matrix.hpp"
#include "esparse/metrics.hpp"
#include "esparse/shuffle.hpp"
#include "esparse/tensor_store.hpp"

namespace esparse {

struct PruneConfig {
  MetricKind metric = MetricKind::esparse;
  double alpha = kDefaultAlpha;
  std::size_t bins = kDefaultBins;
  SparsityPattern pattern{2, 4};
  ShuffleConfig shuffle;
};

struct PruneResult {
  std::string layer_id;
  MetricKind metric = MetricKind::esparse;
  SparsityPattern pattern;
  Mask mask_permuted;   // N:M structured, columns in permuted order
  Mask mask;            // same mask mapped back to original column order
  Tensor pruned_weight; // W * mask, original column order, input dtype kept
  Permutation permutation;
  double recon_error = 0.0;
  double retained_metric_fraction = 1.0;
};

/// Keep the n_keep highest scores of every m_group consecutive columns of
/// every row; ties keep the lower column index.
Mask nm_mask(const MatrixD& scores_permuted, const SparsityPattern& pattern);

/// || X W^T - X Wp^T ||_F for token-major X [T, C].
double reconstruction_error(const MatrixF& weight, const MatrixF& pruned, const MatrixF& activations);

/// Metric, shuffle and N:M mask for one layer. Surviving weights are copied
/// bit for bit; nothing is updated.
PruneResult prune_layer(const LayerBundle& bundle, const PruneConfig& config);

struct ModelReport {
  std::vector<PruneResult> layers;
  double total_recon_error = 0.0;
  double mean_retained_fraction = 0.0;
  std::size_t total_swaps = 0;
};

/// Raised when a layer fails inside prune_model; lists the layers that
/// finished before the failure.
class PruneModelError : public Error {
 public:
  PruneModelError(const std::string& message, std::vector<std::string> completed)
      : Error(message), completed_(std::move(completed)) {}
  const std::vector<std::string>& completed() const noexcept { return completed_; }

 private:
  std::vector<std::string> completed_;
};

/// Prunes every manifest layer and writes, per layer, `<id>.weight.espt`,
/// `<id>.mask.espt` (permuted order, 0/1 f32) and `<id>.perm.json`, plus
/// `summary.csv`.
ModelReport prune_model(const Manifest& manifest, const PruneConfig& config, const std::filesystem::path& out_dir);

void write_permutation_json(const Permutation& permutation, const std::filesystem::path& path);
std::vector<std::size_t> read_permutation_json(const std::filesystem::path& path);

struct SummaryRow {
  std::string layer_id;
  std::string metric;
  std::string pattern;
  double recon_error = 0.0;
  double retained_fraction = 0.0;
  std::size_t swaps_applied = 0;
};

void write_summary_csv(const std::vector<PruneResult>& results, const std::filesystem::path& path);
std::vector<SummaryRow> read_summary_csv(const std::filesystem::path& path);

}  // namespace esparse
