#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "esparse/channel_stats.hpp"
#include "esparse/metrics.hpp"
#include "esparse/pruner.hpp"
#include "esparse/shuffle.hpp"
#include "esparse/sparse_exec.hpp"
#include "esparse/synth_bench.hpp"
#include "esparse/tensor_store.hpp"

namespace py = pybind11;
using namespace esparse;

namespace {

using ArrayF = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ArrayD = py::array_t<double, py::array::c_style | py::array::forcecast>;

MatrixF to_matrix(const ArrayF& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array");
  const auto rows = static_cast<std::size_t>(a.shape(0));
  const auto cols = static_cast<std::size_t>(a.shape(1));
  return MatrixF(rows, cols, std::vector<float>(a.data(), a.data() + rows * cols));
}

MatrixD to_matrix(const ArrayD& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array");
  const auto rows = static_cast<std::size_t>(a.shape(0));
  const auto cols = static_cast<std::size_t>(a.shape(1));
  return MatrixD(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

template <typename T>
py::array_t<T> to_array(const Matrix<T>& m) {
  py::array_t<T> out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

std::vector<py::ssize_t> dims(const Shape& s) { return {s.begin(), s.end()}; }

py::array tensor_to_array(const Tensor& t) {
  if (t.dtype() == DType::f16) {
    py::array out(py::dtype("float16"), dims(t.shape()));
    std::copy(t.f16_bits().begin(), t.f16_bits().end(), static_cast<std::uint16_t*>(out.mutable_data()));
    return out;
  }
  py::array_t<float> out(dims(t.shape()));
  std::copy(t.f32().begin(), t.f32().end(), out.mutable_data());
  return out;
}

Tensor array_to_tensor(const py::array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  if (a.dtype().is(py::dtype("float16"))) {
    const auto c = py::array::ensure(a, py::array::c_style);
    const auto* p = static_cast<const std::uint16_t*>(c.data());
    return Tensor::from_f16_bits(std::move(shape), std::vector<std::uint16_t>(p, p + c.size()));
  }
  const ArrayF f = a;
  return Tensor::from_f32(std::move(shape), std::vector<float>(f.data(), f.data() + f.size()));
}

LayerBundle bundle_of(const py::array& weight, const ArrayF& activations) {
  return make_bundle("layer", array_to_tensor(weight), array_to_tensor(activations));
}

PruneConfig config_of(const std::string& metric, double alpha, std::size_t bins, const std::string& pattern,
                      const std::string& shuffle, std::size_t block_size, std::size_t max_iters) {
  PruneConfig c;
  c.metric = parse_metric_kind(metric);
  c.alpha = alpha;
  c.bins = bins;
  c.pattern = SparsityPattern::parse(pattern);
  c.shuffle = {parse_shuffle_mode(shuffle), block_size, max_iters};
  return c;
}

py::dict permutation_dict(const Permutation& p) {
  py::dict d;
  d["order"] = p.order;
  d["objective_before"] = p.objective_before;
  d["objective_after"] = p.objective_after;
  d["global_applied"] = p.global_applied;
  d["local_applied"] = p.local_applied;
  d["swaps"] = p.swaps.size();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "One-shot N:M pruning with entropy-aware metrics and channel shuffling";

  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("read_tensor", [](const std::filesystem::path& p) { return tensor_to_array(read_tensor(p)); }, py::arg("path"),
        "Load an .espt file as a float32 or float16 array.");
  m.def("write_tensor", [](const py::array& a, const std::filesystem::path& p) { write_tensor(array_to_tensor(a), p); },
        py::arg("array"), py::arg("path"));

  m.def(
      "channel_stats",
      [](const ArrayF& x, std::size_t bins) {
        const ChannelStats s = compute_stats(to_matrix(x), bins);
        py::dict d;
        d["entropy"] = s.entropy;
        d["amplitude"] = s.amplitude;
        d["min"] = s.min;
        d["max"] = s.max;
        return d;
      },
      py::arg("activations"), py::arg("bins") = kDefaultBins);

  m.def(
      "metric",
      [](const ArrayF& w, const ArrayF& x, const std::string& kind, double alpha, std::size_t bins) {
        const MatrixF weight = to_matrix(w);
        const MetricKind k = parse_metric_kind(kind);
        if (k == MetricKind::magnitude) return to_array(magnitude_metric(weight).scores);
        const ChannelStats s = compute_stats(to_matrix(x), bins);
        return to_array(k == MetricKind::esparse ? esparse_metric(weight, s, alpha).scores
                                                 : wanda_metric(weight, s).scores);
      },
      py::arg("weight"), py::arg("activations"), py::arg("kind") = "esparse", py::arg("alpha") = kDefaultAlpha,
      py::arg("bins") = kDefaultBins);

  m.def(
      "retained_objective",
      [](const ArrayD& xi, std::vector<std::size_t> order, const std::string& pattern) {
        return retained_objective(to_matrix(xi), order, SparsityPattern::parse(pattern));
      },
      py::arg("scores"), py::arg("order"), py::arg("pattern") = "2:4");

  m.def(
      "channel_shuffle",
      [](const ArrayD& xi, const std::string& pattern, const std::string& mode, std::size_t block_size,
         std::size_t max_iters) {
        return permutation_dict(
            shuffle_channels(to_matrix(xi), SparsityPattern::parse(pattern), {parse_shuffle_mode(mode), block_size, max_iters}));
      },
      py::arg("scores"), py::arg("pattern") = "2:4", py::arg("mode") = "full", py::arg("block_size") = kDefaultBlockSize,
      py::arg("max_iters") = 0);

  m.def(
      "nm_mask",
      [](const ArrayD& scores, const std::string& pattern) {
        return to_array(nm_mask(to_matrix(scores), SparsityPattern::parse(pattern)));
      },
      py::arg("scores"), py::arg("pattern") = "2:4");

  py::class_<PruneResult>(m, "PruneResult")
      .def_property_readonly("weight", [](const PruneResult& r) { return tensor_to_array(r.pruned_weight); })
      .def_property_readonly("mask", [](const PruneResult& r) { return to_array(r.mask); })
      .def_property_readonly("mask_permuted", [](const PruneResult& r) { return to_array(r.mask_permuted); })
      .def_property_readonly("permutation", [](const PruneResult& r) { return r.permutation.order; })
      .def_property_readonly("swaps", [](const PruneResult& r) { return r.permutation.swaps.size(); })
      .def_readonly("recon_error", &PruneResult::recon_error)
      .def_readonly("retained_fraction", &PruneResult::retained_metric_fraction);

  m.def(
      "prune_layer",
      [](const py::array& w, const ArrayF& x, const std::string& metric, double alpha, std::size_t bins,
         const std::string& pattern, const std::string& shuffle, std::size_t block_size, std::size_t max_iters) {
        return prune_layer(bundle_of(w, x), config_of(metric, alpha, bins, pattern, shuffle, block_size, max_iters));
      },
      py::arg("weight"), py::arg("activations"), py::arg("metric") = "esparse", py::arg("alpha") = kDefaultAlpha,
      py::arg("bins") = kDefaultBins, py::arg("pattern") = "2:4", py::arg("shuffle") = "full",
      py::arg("block_size") = kDefaultBlockSize, py::arg("max_iters") = 0);

  py::class_<PackedSparseWeight>(m, "PackedWeight")
      .def_readonly("rows", &PackedSparseWeight::rows)
      .def_readonly("cols", &PackedSparseWeight::cols)
      .def_property_readonly("value_bytes", &PackedSparseWeight::value_bytes)
      .def_property_readonly("index_bytes", &PackedSparseWeight::index_bytes)
      .def("dense", [](const PackedSparseWeight& w) { return to_array(unpack_dense(w)); })
      .def("gemm", [](const PackedSparseWeight& w, const ArrayF& x) { return to_array(sparse_gemm(w, to_matrix(x))); },
           py::arg("activations"))
      .def("invariant_violations", &check_invariants)
      .def(
          "accounting",
          [](const PackedSparseWeight& w, std::uint64_t tokens) {
            const Accounting a = account(w, tokens);
            py::dict d;
            d["flop_ratio"] = a.flop_ratio;
            d["bytes_dense"] = a.bytes_dense;
            d["bytes_sparse"] = a.bytes_sparse;
            d["memory_saving"] = a.memory_saving;
            return d;
          },
          py::arg("tokens") = 1)
      .def("save", [](const PackedSparseWeight& w, const std::filesystem::path& p) { write_packed(w, p); });

  m.def("pack", [](const PruneResult& r) { return pack(r); }, py::arg("result"));
  m.def("load_packed", [](const std::filesystem::path& p) { return read_packed(p); }, py::arg("path"));

  m.def(
      "synth_layer",
      [](std::uint64_t seed, std::size_t tokens, std::size_t channels, std::size_t out_channels,
         double outlier_fraction, const std::string& profile) {
        SynthSpec spec;
        spec.seed = seed;
        spec.tokens = tokens;
        spec.channels = channels;
        spec.out_channels = out_channels;
        spec.outlier_fraction = outlier_fraction;
        spec.std_profile = parse_std_profile(profile);
        const SynthLayer l = generate(spec);
        return py::make_tuple(tensor_to_array(l.bundle.weight), tensor_to_array(l.bundle.calib_activations),
                              l.outlier_channels);
      },
      py::arg("seed") = 0, py::arg("tokens") = 2048, py::arg("channels") = 256, py::arg("out_channels") = 256,
      py::arg("outlier_fraction") = 0.0, py::arg("profile") = "iid");
}
