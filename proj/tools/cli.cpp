#include "cli.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include <fmt/core.h>
#include <fmt/ostream.h>

#include "CLI11.hpp"
#include "esparse/channel_stats.hpp"
#include "esparse/half.hpp"
#include "esparse/pruner.hpp"
#include "esparse/sparse_exec.hpp"
#include "esparse/synth_bench.hpp"
#include "esparse/tensor_store.hpp"

namespace esparse::cli {
namespace fs = std::filesystem;

namespace {

struct Config {
  std::string manifest;
  std::string out_dir;
  std::string metric = "esparse";
  double alpha = kDefaultAlpha;
  std::size_t bins = kDefaultBins;
  std::string pattern = "2:4";
  std::string shuffle = "full";
  std::size_t block_size = kDefaultBlockSize;
  std::size_t max_iters = 0;
  std::uint64_t seed = 0;
};

PruneConfig to_prune_config(const Config& c) {
  PruneConfig p;
  p.metric = parse_metric_kind(c.metric);
  p.alpha = c.alpha;
  if (!(p.alpha >= 0.0)) throw ValidationError(fmt::format("--alpha must be >= 0, got {}", c.alpha));
  p.bins = c.bins;
  if (p.bins < 2) throw ValidationError(fmt::format("--bins must be at least 2, got {}", c.bins));
  p.pattern = SparsityPattern::parse(c.pattern);
  p.shuffle.mode = parse_shuffle_mode(c.shuffle);
  p.shuffle.block_size = c.block_size;
  p.shuffle.max_iters = c.max_iters;
  if (c.block_size == 0 || c.block_size % p.pattern.m_group != 0) {
    throw ValidationError(
        fmt::format("--block-size {} must be a positive multiple of M = {}", c.block_size, p.pattern.m_group));
  }
  return p;
}

double relative_frobenius(const MatrixF& got, const MatrixF& want) {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i) {
    const double d = static_cast<double>(got.data()[i]) - static_cast<double>(want.data()[i]);
    num += d * d;
    den += static_cast<double>(want.data()[i]) * static_cast<double>(want.data()[i]);
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

int cmd_stats(const Config& c, const std::string& layer_filter, std::ostream& out) {
  const Manifest manifest = load_manifest(c.manifest);
  if (c.bins < 2) throw ValidationError(fmt::format("--bins must be at least 2, got {}", c.bins));
  if (!c.out_dir.empty()) fs::create_directories(c.out_dir);
  for (const auto& layer : manifest.layers) {
    if (!layer_filter.empty() && layer.layer_id != layer_filter) continue;
    const LayerBundle bundle = load_bundle(manifest, layer.layer_id);
    const ChannelStats stats = compute_stats(bundle.calib_activations, c.bins);
    if (c.out_dir.empty()) {
      out << "# " << layer.layer_id << '\n';
      write_stats_csv(stats, out);
    } else {
      const fs::path path = fs::path(c.out_dir) / (layer.layer_id + ".stats.csv");
      std::ofstream file(path, std::ios::trunc);
      if (!file) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
      write_stats_csv(stats, file);
      out << fmt::format("{}: {} channels -> {}\n", layer.layer_id, stats.channel_count(), path.string());
    }
  }
  return kOk;
}

int cmd_prune(const Config& c, std::ostream& out) {
  const PruneConfig config = to_prune_config(c);
  const Manifest manifest = load_manifest(c.manifest);
  const ModelReport report = prune_model(manifest, config, c.out_dir);
  for (const auto& r : report.layers) {
    out << fmt::format("{}: pattern {} metric {} recon_error {:.6g} retained {:.6f} swaps {}\n", r.layer_id,
                       r.pattern.str(), to_string(r.metric), r.recon_error, r.retained_metric_fraction,
                       r.permutation.swaps.size());
  }
  out << fmt::format("layers {} total_recon_error {:.6g} mean_retained {:.6f}\n", report.layers.size(),
                     report.total_recon_error, report.mean_retained_fraction);
  return kOk;
}

int cmd_pack(const std::string& pruned_dir, std::string out_dir, std::ostream& out) {
  if (out_dir.empty()) out_dir = pruned_dir;
  fs::create_directories(out_dir);
  const auto rows = read_summary_csv(fs::path(pruned_dir) / "summary.csv");
  for (const auto& row : rows) {
    if (row.pattern != "2:4") {
      throw ValidationError(fmt::format("layer '{}' uses pattern {}; only 2:4 can be packed", row.layer_id, row.pattern));
    }
    const fs::path base = fs::path(pruned_dir) / row.layer_id;
    const Tensor weight = read_tensor(base.string() + ".weight.espt");
    const Tensor mask = read_tensor(base.string() + ".mask.espt");
    const auto order = read_permutation_json(base.string() + ".perm.json");
    if (weight.rank() != 2 || mask.shape() != weight.shape() || order.size() != weight.shape()[1]) {
      throw ShapeError(fmt::format("layer '{}': weight, mask and permutation shapes disagree", row.layer_id));
    }

    std::vector<std::uint16_t> bits;
    if (weight.dtype() == DType::f16) {
      bits.assign(weight.f16_bits().begin(), weight.f16_bits().end());
    } else {
      for (float v : weight.f32()) bits.push_back(float_to_half(v));
    }
    const std::size_t r = weight.shape()[0];
    const std::size_t cols = weight.shape()[1];
    const Matrix<std::uint16_t> dense(r, cols, std::move(bits));
    Mask mask_permuted(r, cols);
    for (std::size_t i = 0; i < mask.numel(); ++i) mask_permuted.data()[i] = mask.value(i) != 0.0f ? 1 : 0;

    const PackedSparseWeight packed = pack_permuted(permute_columns(dense, order), mask_permuted, order);
    const fs::path target = fs::path(out_dir) / (row.layer_id + ".espk");
    write_packed(packed, target);
    const Accounting a = account(packed, 1);
    out << fmt::format("{}: {}x{} -> {} ({} bytes, saving {:.4f}%)\n", row.layer_id, packed.rows, packed.cols,
                       target.string(), a.bytes_sparse, 100.0 * a.memory_saving);
  }
  return kOk;
}

int cmd_eval(const Config& c, const std::string& packed_dir, double tolerance, std::ostream& out) {
  const Manifest manifest = load_manifest(c.manifest);
  out << "layer_id,gemm_rel_error,recon_error,flop_ratio,memory_saving\n";
  bool ok = true;
  for (const auto& layer : manifest.layers) {
    const LayerBundle bundle = load_bundle(manifest, layer.layer_id);
    const PackedSparseWeight packed = read_packed(fs::path(packed_dir) / (layer.layer_id + ".espk"));
    const MatrixF x = bundle.calib_activations.to_matrix();
    const MatrixF masked = unpack_dense(packed);
    if (masked.rows() != bundle.out_channels() || masked.cols() != bundle.in_channels()) {
      throw ShapeError(fmt::format("layer '{}': packed weight shape differs from the manifest weight", layer.layer_id));
    }
    const double gemm_error = relative_frobenius(sparse_gemm(packed, x), dense_gemm(masked, x));
    const double recon = reconstruction_error(bundle.weight.to_matrix(), masked, x);
    const Accounting a = account(packed, bundle.tokens());
    out << fmt::format("{},{:.3e},{:.9g},{:.4f},{:.6f}\n", layer.layer_id, gemm_error, recon, a.flop_ratio,
                       a.memory_saving);
    if (!(gemm_error < tolerance)) ok = false;
  }
  return ok ? kOk : kFailure;
}

int cmd_gemm_bench(std::size_t rows, std::size_t cols, std::size_t tokens, std::uint64_t seed, int repeats,
                   std::ostream& out) {
  if (cols == 0 || cols % 4 != 0) throw ValidationError(fmt::format("--cols {} must be a positive multiple of 4", cols));
  if (rows == 0 || tokens == 0 || repeats < 1) throw ValidationError("--rows, --tokens and --repeats must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  MatrixF w(rows, cols);
  MatrixF x(tokens, cols);
  for (auto& v : w.data()) v = half_to_float(float_to_half(normal(rng)));
  for (auto& v : x.data()) v = normal(rng);
  std::vector<std::size_t> order(cols);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  const SparsityPattern pattern{2, 4};
  const MatrixF permuted = permute_columns(w, order);
  const Mask mask = nm_mask(magnitude_metric(permuted).scores, pattern);
  Matrix<std::uint16_t> bits(rows, cols);
  for (std::size_t i = 0; i < bits.size(); ++i) bits.data()[i] = float_to_half(permuted.data()[i]);
  const PackedSparseWeight packed = pack_permuted(bits, mask, order);
  const MatrixF masked = unpack_dense(packed);

  using clock = std::chrono::steady_clock;
  auto time_it = [&](auto&& fn) {
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < repeats; ++i) {
      const auto t0 = clock::now();
      fn();
      best = std::min(best, std::chrono::duration<double, std::milli>(clock::now() - t0).count());
    }
    return best;
  };
  MatrixF sparse_out;
  MatrixF dense_out;
  const double sparse_ms = time_it([&] { sparse_out = sparse_gemm(packed, x); });
  const double dense_ms = time_it([&] { dense_out = dense_gemm(masked, x); });
  const Accounting a = account(packed, tokens);

  out << fmt::format("shape {}x{} tokens {} pattern 2:4\n", rows, cols, tokens);
  out << fmt::format("flops_dense {} flops_sparse {} flop_ratio {:.4f}\n", a.flops_dense, a.flops_sparse, a.flop_ratio);
  out << fmt::format("bytes_dense {} bytes_sparse {} memory_saving {:.4f}%\n", a.bytes_dense, a.bytes_sparse,
                     100.0 * a.memory_saving);
  out << fmt::format("dense_ms {:.3f} sparse_ms {:.3f} (reference kernels, relative only)\n", dense_ms, sparse_ms);
  out << fmt::format("rel_error {:.3e}\n", relative_frobenius(sparse_out, dense_out));
  return kOk;
}

int cmd_inspect(const std::string& path, std::ostream& out) {
  char magic[4] = {};
  {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(fmt::format("cannot open '{}'", path));
    in.read(magic, 4);
  }
  if (std::memcmp(magic, "ESPT", 4) == 0) {
    const TensorHeader h = read_tensor_header(path);
    std::string dims;
    for (std::size_t i = 0; i < h.shape.size(); ++i) dims += (i ? "x" : "") + std::to_string(h.shape[i]);
    out << fmt::format("format ESPT\nversion {}\ndtype {}\nshape {}\npayload_bytes {}\n", h.version,
                       to_string(h.dtype), dims, h.payload_bytes);
    read_tensor(path);
    out << "invariants OK\n";
    return kOk;
  }
  if (std::memcmp(magic, "ESPK", 4) == 0) {
    const PackedSparseWeight w = read_packed(path, false);
    const Accounting a = account(w, 1);
    out << fmt::format("format ESPK\nversion {}\nrows {}\ncols {}\npattern {}\npermutation_length {}\n",
                       kPackedFormatVersion, w.rows, w.cols, w.pattern.str(), w.permutation.size());
    out << fmt::format("value_bytes {}\nindex_bytes {}\nheader_bytes {}\nmemory_saving {:.4f}%\n", w.value_bytes(),
                       w.index_bytes(), packed_header_bytes(w), 100.0 * a.memory_saving);
    const auto problems = check_invariants(w);
    if (problems.empty()) {
      out << "invariants OK\n";
      return kOk;
    }
    for (const auto& p : problems) out << "invariant violation: " << p << '\n';
    return kFailure;
  }
  throw FormatError(fmt::format("{}: unrecognized magic", path));
}

struct BenchOptions {
  SynthSpec spec;
  std::string profile = "smooth_adjacent";
  std::size_t seeds = 1;
  std::string pattern = "2:4";
  AblationOptions ablation;
};

int cmd_bench(BenchOptions o, std::ostream& out) {
  o.spec.std_profile = parse_std_profile(o.profile);
  const SparsityPattern pattern = SparsityPattern::parse(o.pattern);
  out << "seed,config,metric,shuffle,recon_error,retained_fraction,swaps_applied\n";
  for (std::size_t s = 0; s < o.seeds; ++s) {
    SynthSpec spec = o.spec;
    spec.seed = o.spec.seed + s;
    const SynthLayer layer = generate(spec);
    for (const auto& r : ablation_run(layer.bundle, pattern, o.ablation)) {
      out << fmt::format("{},{},{},{},{:.9g},{:.9g},{}\n", spec.seed, r.config, to_string(r.metric),
                         to_string(r.shuffle), r.recon_error, r.retained_fraction, r.swaps_applied);
    }
  }
  return kOk;
}

int cmd_synth(BenchOptions o, const std::string& out_dir, std::size_t layers, bool f16, std::ostream& out) {
  o.spec.std_profile = parse_std_profile(o.profile);
  if (layers == 0) throw ValidationError("--layers must be positive");
  fs::create_directories(out_dir);
  Manifest manifest;
  manifest.model_name = "synthetic";
  manifest.token_count = o.spec.tokens;
  for (std::size_t i = 0; i < layers; ++i) {
    SynthSpec spec = o.spec;
    spec.seed = o.spec.seed + i;
    const std::string id = fmt::format("layer{}", i);
    const SynthLayer layer = generate(spec, id);
    Tensor weight = layer.bundle.weight;
    if (f16) weight = Tensor::f16_from_f32(weight.shape(), weight.f32());
    write_tensor(weight, fs::path(out_dir) / (id + ".weight.espt"));
    write_tensor(layer.bundle.calib_activations, fs::path(out_dir) / (id + ".act.espt"));
    manifest.layers.push_back({id, id + ".weight.espt", id + ".act.espt"});
  }
  save_manifest(manifest, fs::path(out_dir) / "manifest.json");
  out << fmt::format("wrote {} layers to {}\n", layers, (fs::path(out_dir) / "manifest.json").string());
  return kOk;
}

void add_prune_flags(CLI::App* cmd, Config& c) {
  cmd->add_option("--metric", c.metric, "Importance metric: esparse, wanda or magnitude")->capture_default_str();
  cmd->add_option("--alpha", c.alpha, "Amplitude weight in the esparse metric")->capture_default_str();
  cmd->add_option("--bins", c.bins, "Histogram bins for the entropy term")->capture_default_str();
  cmd->add_option("--pattern", c.pattern, "Sparsity pattern N:M")->capture_default_str();
  cmd->add_option("--shuffle", c.shuffle, "Channel shuffle: none, global or full")->capture_default_str();
  cmd->add_option("--block-size", c.block_size, "Channels per local shuffle block")->capture_default_str();
  cmd->add_option("--max-iters", c.max_iters, "Swap cap per block (0 = 10 x block size)")->capture_default_str();
}

void add_synth_flags(CLI::App* cmd, BenchOptions& o) {
  cmd->add_option("--seed", o.spec.seed, "First seed")->capture_default_str();
  cmd->add_option("--tokens", o.spec.tokens, "Calibration tokens T")->capture_default_str();
  cmd->add_option("--channels", o.spec.channels, "Input channels C")->capture_default_str();
  cmd->add_option("--out-channels", o.spec.out_channels, "Output channels")->capture_default_str();
  cmd->add_option("--outlier-fraction", o.spec.outlier_fraction, "Fraction of outlier channels")->capture_default_str();
  cmd->add_option("--outlier-scale", o.spec.outlier_scale, "Outlier amplitude over the median")->capture_default_str();
  cmd->add_option("--profile", o.profile, "Channel std profile: iid or smooth_adjacent")->capture_default_str();
  cmd->add_option("--activation-std", o.spec.activation_std, "Typical activation std")->capture_default_str();
  cmd->add_option("--weight-std", o.spec.weight_std, "Weight std")->capture_default_str();
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"N:M sparsification with entropy-augmented channel importance and channel shuffling", "esparse"};
  app.require_subcommand(1);

  Config c;
  std::string layer_filter;
  std::string pruned_dir;
  std::string packed_dir;
  std::string inspect_path;
  double tolerance = 1e-5;
  std::size_t bench_rows = 1024;
  std::size_t bench_cols = 1024;
  std::size_t bench_tokens = 64;
  int bench_repeats = 5;
  std::size_t synth_layers = 2;
  bool synth_f16 = false;
  BenchOptions bench;
  bench.spec.outlier_fraction = 0.05;

  auto* stats = app.add_subcommand("stats", "Per-channel entropy and amplitude as CSV");
  stats->add_option("--manifest", c.manifest, "Layer manifest (JSON)")->required();
  stats->add_option("--bins", c.bins, "Histogram bins")->capture_default_str();
  stats->add_option("--out", c.out_dir, "Directory for <layer>.stats.csv (default: stdout)");
  stats->add_option("--layer", layer_filter, "Only this layer");

  auto* prune = app.add_subcommand("prune", "Prune every manifest layer to N:M");
  prune->add_option("--manifest", c.manifest, "Layer manifest (JSON)")->required();
  prune->add_option("--out", c.out_dir, "Output directory")->required();
  add_prune_flags(prune, c);

  auto* pack_cmd = app.add_subcommand("pack", "Compress 2:4-pruned layers into .espk files");
  pack_cmd->add_option("--pruned", pruned_dir, "Directory written by prune")->required();
  pack_cmd->add_option("--out", c.out_dir, "Output directory (default: the pruned directory)");

  auto* eval = app.add_subcommand("eval", "Check sparse GEMM against the dense masked reference");
  eval->add_option("--manifest", c.manifest, "Layer manifest (JSON)")->required();
  eval->add_option("--packed", packed_dir, "Directory holding <layer>.espk files")->required();
  eval->add_option("--tolerance", tolerance, "Max relative Frobenius error")->capture_default_str();

  auto* gemm = app.add_subcommand("gemm-bench", "Time the reference sparse and dense kernels");
  gemm->add_option("--rows", bench_rows)->capture_default_str();
  gemm->add_option("--cols", bench_cols)->capture_default_str();
  gemm->add_option("--tokens", bench_tokens)->capture_default_str();
  gemm->add_option("--seed", c.seed)->capture_default_str();
  gemm->add_option("--repeats", bench_repeats)->capture_default_str();

  auto* inspect = app.add_subcommand("inspect", "Dump the header of an .espt/.espk file and check invariants");
  inspect->add_option("path", inspect_path, "File to inspect")->required();

  auto* bench_cmd = app.add_subcommand("bench", "Metric and shuffle ablation on synthetic layers");
  add_synth_flags(bench_cmd, bench);
  bench_cmd->add_option("--seeds", bench.seeds, "Number of consecutive seeds")->capture_default_str();
  bench_cmd->add_option("--pattern", bench.pattern, "Sparsity pattern N:M")->capture_default_str();
  bench_cmd->add_option("--alpha", bench.ablation.alpha)->capture_default_str();
  bench_cmd->add_option("--bins", bench.ablation.bins)->capture_default_str();
  bench_cmd->add_option("--block-size", bench.ablation.block_size)->capture_default_str();
  bench_cmd->add_option("--max-iters", bench.ablation.max_iters)->capture_default_str();

  auto* synth = app.add_subcommand("synth", "Write synthetic layers as ESPT files plus a manifest");
  add_synth_flags(synth, bench);
  synth->add_option("--out", c.out_dir, "Output directory")->required();
  synth->add_option("--layers", synth_layers, "Number of layers")->capture_default_str();
  synth->add_flag("--f16", synth_f16, "Store weights as f16");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsage;
  }

  try {
    if (stats->parsed()) return cmd_stats(c, layer_filter, out);
    if (prune->parsed()) return cmd_prune(c, out);
    if (pack_cmd->parsed()) return cmd_pack(pruned_dir, c.out_dir, out);
    if (eval->parsed()) return cmd_eval(c, packed_dir, tolerance, out);
    if (gemm->parsed()) return cmd_gemm_bench(bench_rows, bench_cols, bench_tokens, c.seed, bench_repeats, out);
    if (inspect->parsed()) return cmd_inspect(inspect_path, out);
    if (bench_cmd->parsed()) return cmd_bench(bench, out);
    if (synth->parsed()) return cmd_synth(bench, c.out_dir, synth_layers, synth_f16, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const PruneModelError& e) {
    err << "error: " << e.what() << '\n';
    err << fmt::format("completed layers: {}\n", e.completed().size());
    for (const auto& id : e.completed()) err << "  " << id << '\n';
    return kFailure;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

}  // namespace esparse::cli
