#include "esparse/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include <fmt/core.h>

#include "esparse/half.hpp"
#include "json.hpp"

namespace esparse {
namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'E', 'S', 'P', 'T'};

template <typename T>
void put_le(std::vector<std::byte>& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::byte>(u & 0xffu));
    u = static_cast<U>(u >> 8);
  }
}

template <typename T>
T get_le(std::span<const std::byte> in, std::size_t offset) {
  std::make_unsigned_t<T> u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    u |= static_cast<std::make_unsigned_t<T>>(static_cast<std::uint8_t>(in[offset + i])) << (8 * i);
  }
  return static_cast<T>(u);
}

// Element count, or nullopt-equivalent via exception when the product overflows.
std::uint64_t checked_numel(const Shape& shape, std::size_t elem_size, std::string_view what) {
  if (shape.empty()) throw ValidationError(fmt::format("{}: rank must be at least 1", what));
  std::uint64_t n = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == 0) throw ValidationError(fmt::format("{}: dimension {} is zero", what, i));
    if (n > std::numeric_limits<std::uint64_t>::max() / shape[i]) {
      throw ValidationError(fmt::format("{}: element count overflows 64 bits", what));
    }
    n *= shape[i];
  }
  if (n > std::numeric_limits<std::uint64_t>::max() / elem_size) {
    throw ValidationError(fmt::format("{}: byte count overflows 64 bits", what));
  }
  return n;
}

std::vector<std::byte> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open '{}' for reading", path.string()));
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::byte> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw IoError(fmt::format("failed reading '{}'", path.string()));
  }
  return bytes;
}

TensorHeader parse_header(std::span<const std::byte> bytes, std::string_view source) {
  constexpr std::size_t kFixed = 4 + 4 + 1 + 1;
  if (bytes.size() < kFixed) {
    throw FormatError(fmt::format("{}: truncated header: expected at least {} bytes, got {}", source, kFixed,
                                  bytes.size()));
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(fmt::format("{}: bad magic, not an ESPT file", source));

  TensorHeader h;
  h.version = get_le<std::uint32_t>(bytes, 4);
  if (h.version != kTensorFormatVersion) {
    throw FormatError(fmt::format("{}: unsupported version {}", source, h.version));
  }
  const auto dtype_code = static_cast<std::uint8_t>(bytes[8]);
  if (dtype_code > 1) throw FormatError(fmt::format("{}: unknown dtype code {}", source, dtype_code));
  h.dtype = static_cast<DType>(dtype_code);
  const auto rank = static_cast<std::uint8_t>(bytes[9]);
  if (rank == 0) throw FormatError(fmt::format("{}: rank 0 tensors are not allowed", source));

  h.header_bytes = kFixed + 8ull * rank;
  if (bytes.size() < h.header_bytes) {
    throw FormatError(fmt::format("{}: truncated header: expected {} bytes, got {}", source, h.header_bytes,
                                  bytes.size()));
  }
  h.shape.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) h.shape[i] = get_le<std::uint64_t>(bytes, kFixed + 8 * i);
  try {
    h.payload_bytes = checked_numel(h.shape, dtype_size(h.dtype), source) * dtype_size(h.dtype);
  } catch (const ValidationError& e) {
    throw FormatError(e.what());
  }
  return h;
}

void check_finite(const Tensor& t, std::string_view source) {
  const std::size_t bad = t.first_non_finite();
  if (bad != t.numel()) {
    throw ValidationError(fmt::format("{}: non-finite value at element {}", source, bad));
  }
}

}  // namespace

std::string_view to_string(DType dtype) { return dtype == DType::f32 ? "f32" : "f16"; }

std::size_t dtype_size(DType dtype) { return dtype == DType::f32 ? 4 : 2; }

Tensor::Tensor(DType dtype, Shape shape, std::variant<std::vector<float>, std::vector<std::uint16_t>> data)
    : dtype_(dtype), shape_(std::move(shape)), data_(std::move(data)) {
  const auto n = checked_numel(shape_, dtype_size(dtype_), "tensor");
  const std::size_t have = std::visit([](const auto& v) { return v.size(); }, data_);
  if (have != n) {
    throw ShapeError(fmt::format("tensor: shape holds {} elements but buffer has {}", n, have));
  }
}

Tensor Tensor::from_f32(Shape shape, std::vector<float> values) {
  return Tensor(DType::f32, std::move(shape), std::move(values));
}

Tensor Tensor::from_f16_bits(Shape shape, std::vector<std::uint16_t> bits) {
  return Tensor(DType::f16, std::move(shape), std::move(bits));
}

Tensor Tensor::f16_from_f32(Shape shape, std::span<const float> values) {
  std::vector<std::uint16_t> bits(values.size());
  std::transform(values.begin(), values.end(), bits.begin(), float_to_half);
  return from_f16_bits(std::move(shape), std::move(bits));
}

Tensor Tensor::from_matrix(const MatrixF& m) {
  return from_f32({m.rows(), m.cols()}, m.storage());
}

std::size_t Tensor::numel() const noexcept {
  return std::visit([](const auto& v) { return v.size(); }, data_);
}

std::span<const float> Tensor::f32() const {
  if (dtype_ != DType::f32) throw ValidationError("tensor is not f32");
  return std::get<std::vector<float>>(data_);
}

std::span<const std::uint16_t> Tensor::f16_bits() const {
  if (dtype_ != DType::f16) throw ValidationError("tensor is not f16");
  return std::get<std::vector<std::uint16_t>>(data_);
}

float Tensor::value(std::size_t index) const {
  if (dtype_ == DType::f32) return std::get<std::vector<float>>(data_)[index];
  return half_to_float(std::get<std::vector<std::uint16_t>>(data_)[index]);
}

std::vector<float> Tensor::to_f32() const {
  if (dtype_ == DType::f32) return std::get<std::vector<float>>(data_);
  const auto& bits = std::get<std::vector<std::uint16_t>>(data_);
  std::vector<float> out(bits.size());
  std::transform(bits.begin(), bits.end(), out.begin(), half_to_float);
  return out;
}

MatrixF Tensor::to_matrix() const {
  if (rank() != 2) throw ShapeError(fmt::format("expected a rank-2 tensor, got rank {}", rank()));
  return MatrixF(shape_[0], shape_[1], to_f32());
}

std::size_t Tensor::first_non_finite() const noexcept {
  if (dtype_ == DType::f32) {
    const auto& v = std::get<std::vector<float>>(data_);
    const auto it = std::find_if(v.begin(), v.end(), [](float x) { return !std::isfinite(x); });
    return static_cast<std::size_t>(it - v.begin());
  }
  const auto& v = std::get<std::vector<std::uint16_t>>(data_);
  const auto it = std::find_if(v.begin(), v.end(), [](std::uint16_t h) { return !half_is_finite(h); });
  return static_cast<std::size_t>(it - v.begin());
}

bool operator==(const Tensor& a, const Tensor& b) {
  if (a.dtype_ != b.dtype_ || a.shape_ != b.shape_) return false;
  if (a.dtype_ == DType::f16) {
    return std::get<std::vector<std::uint16_t>>(a.data_) == std::get<std::vector<std::uint16_t>>(b.data_);
  }
  const auto& x = std::get<std::vector<float>>(a.data_);
  const auto& y = std::get<std::vector<float>>(b.data_);
  return std::equal(x.begin(), x.end(), y.begin(), y.end(), [](float p, float q) {
    return std::bit_cast<std::uint32_t>(p) == std::bit_cast<std::uint32_t>(q);
  });
}

std::vector<std::byte> encode_tensor(const Tensor& t) {
  if (t.rank() == 0) throw ValidationError("tensor: rank must be at least 1");
  if (t.rank() > 255) throw ValidationError("tensor: rank exceeds 255");
  check_finite(t, "tensor");
  const std::uint64_t payload = checked_numel(t.shape(), dtype_size(t.dtype()), "tensor") * dtype_size(t.dtype());

  std::vector<std::byte> out;
  out.reserve(10 + 8 * t.rank() + payload);
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  put_le<std::uint32_t>(out, kTensorFormatVersion);
  out.push_back(static_cast<std::byte>(t.dtype()));
  out.push_back(static_cast<std::byte>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint64_t>(out, d);

  if (t.dtype() == DType::f32) {
    for (float v : t.f32()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  } else {
    for (auto h : t.f16_bits()) put_le<std::uint16_t>(out, h);
  }
  return out;
}

Tensor decode_tensor(std::span<const std::byte> bytes, std::string_view source) {
  const TensorHeader h = parse_header(bytes, source);
  const std::uint64_t expected = h.header_bytes + h.payload_bytes;
  if (bytes.size() != expected) {
    throw FormatError(fmt::format("{}: payload size mismatch: expected {} bytes, got {}", source, expected,
                                  bytes.size()));
  }
  const std::size_t n = h.payload_bytes / dtype_size(h.dtype);
  const std::size_t base = h.header_bytes;
  Tensor t;
  if (h.dtype == DType::f32) {
    std::vector<float> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, base + 4 * i));
    t = Tensor::from_f32(h.shape, std::move(v));
  } else {
    std::vector<std::uint16_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = get_le<std::uint16_t>(bytes, base + 2 * i);
    t = Tensor::from_f16_bits(h.shape, std::move(v));
  }
  check_finite(t, source);
  return t;
}

void write_tensor(const Tensor& t, const fs::path& path) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(fmt::format("failed writing '{}'", path.string()));
}

Tensor read_tensor(const fs::path& path) { return decode_tensor(read_file(path), path.string()); }

TensorHeader read_tensor_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open '{}' for reading", path.string()));
  std::vector<std::byte> head(10 + 8 * 255);
  in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(in.gcount()));
  TensorHeader h = parse_header(head, path.string());
  const auto size = fs::file_size(path);
  if (size != h.header_bytes + h.payload_bytes) {
    throw FormatError(fmt::format("{}: payload size mismatch: expected {} bytes, got {}", path.string(),
                                  h.header_bytes + h.payload_bytes, size));
  }
  return h;
}

const ManifestLayer& Manifest::layer(std::string_view layer_id) const {
  const auto it = std::find_if(layers.begin(), layers.end(), [&](const auto& l) { return l.layer_id == layer_id; });
  if (it == layers.end()) throw ValidationError(fmt::format("manifest has no layer '{}'", layer_id));
  return *it;
}

fs::path Manifest::resolve(const std::string& path) const {
  const fs::path p(path);
  return p.is_absolute() ? p : base_dir / p;
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open manifest '{}'", path.string()));

  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(fmt::format("{}: invalid JSON: {}", path.string(), e.what()));
  }

  Manifest m;
  m.base_dir = path.parent_path();
  try {
    m.model_name = doc.at("model_name").get<std::string>();
    m.token_count = doc.at("token_count").get<std::uint64_t>();
    for (const auto& entry : doc.at("layers")) {
      ManifestLayer layer;
      layer.layer_id = entry.at("layer_id").get<std::string>();
      layer.weight_path = entry.at("weight_path").get<std::string>();
      layer.activation_path = entry.at("activation_path").get<std::string>();
      m.layers.push_back(std::move(layer));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("{}: malformed manifest: {}", path.string(), e.what()));
  }

  std::set<std::string> seen;
  for (const auto& layer : m.layers) {
    if (layer.layer_id.empty() || layer.layer_id.find('/') != std::string::npos) {
      throw ValidationError(fmt::format("{}: invalid layer_id '{}'", path.string(), layer.layer_id));
    }
    if (!seen.insert(layer.layer_id).second) {
      throw ValidationError(fmt::format("{}: duplicate layer_id '{}'", path.string(), layer.layer_id));
    }
    read_tensor_header(m.resolve(layer.weight_path));
    read_tensor_header(m.resolve(layer.activation_path));
  }
  return m;
}

void save_manifest(const Manifest& manifest, const fs::path& path) {
  nlohmann::ordered_json doc;
  doc["model_name"] = manifest.model_name;
  doc["layers"] = nlohmann::ordered_json::array();
  for (const auto& layer : manifest.layers) {
    doc["layers"].push_back({{"layer_id", layer.layer_id},
                             {"weight_path", layer.weight_path},
                             {"activation_path", layer.activation_path}});
  }
  doc["token_count"] = manifest.token_count;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
  out << doc.dump(2) << '\n';
}

LayerBundle make_bundle(std::string layer_id, Tensor weight, Tensor activations) {
  if (weight.rank() != 2) {
    throw ShapeError(fmt::format("layer '{}': weight must be rank 2, got rank {}", layer_id, weight.rank()));
  }
  if (activations.rank() != 2) {
    throw ShapeError(
        fmt::format("layer '{}': activations must be rank 2 [T, C], got rank {}", layer_id, activations.rank()));
  }
  if (weight.shape()[1] != activations.shape()[1]) {
    throw ShapeError(fmt::format("layer '{}': channel mismatch: weight has {} input channels, activations have {}",
                                 layer_id, weight.shape()[1], activations.shape()[1]));
  }
  check_finite(weight, layer_id + " weight");
  check_finite(activations, layer_id + " activations");
  return LayerBundle{std::move(layer_id), std::move(weight), std::move(activations)};
}

LayerBundle load_bundle(const Manifest& manifest, std::string_view layer_id) {
  const ManifestLayer& entry = manifest.layer(layer_id);
  auto bundle = make_bundle(entry.layer_id, read_tensor(manifest.resolve(entry.weight_path)),
                            read_tensor(manifest.resolve(entry.activation_path)));
  if (manifest.token_count != 0 && bundle.tokens() != manifest.token_count) {
    throw ValidationError(fmt::format("layer '{}': activations hold {} tokens, manifest declares {}",
                                      entry.layer_id, bundle.tokens(), manifest.token_count));
  }
  return bundle;
}

}  // namespace esparse
