#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "esparse/matrix.hpp"

namespace esparse {

enum class DType : std::uint8_t { f32 = 0, f16 = 1 };

std::string_view to_string(DType dtype);
std::size_t dtype_size(DType dtype);

using Shape = std::vector<std::uint64_t>;

/// Dense row-major tensor with a storage dtype tag. f16 payloads are kept as
/// raw 16-bit words so that loads and saves are bit-exact.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_f32(Shape shape, std::vector<float> values);
  static Tensor from_f16_bits(Shape shape, std::vector<std::uint16_t> bits);
  /// Rounds every value to the nearest f16.
  static Tensor f16_from_f32(Shape shape, std::span<const float> values);
  static Tensor from_matrix(const MatrixF& m);

  DType dtype() const noexcept { return dtype_; }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept;
  std::size_t byte_size() const noexcept { return numel() * dtype_size(dtype_); }

  std::span<const float> f32() const;
  std::span<const std::uint16_t> f16_bits() const;

  float value(std::size_t index) const;
  std::vector<float> to_f32() const;
  /// Requires rank 2. Converts to f32 for compute.
  MatrixF to_matrix() const;

  /// Index of the first NaN/Inf element, or numel() when all are finite.
  std::size_t first_non_finite() const noexcept;

  /// Bitwise equality of dtype, shape and payload.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Tensor(DType dtype, Shape shape, std::variant<std::vector<float>, std::vector<std::uint16_t>> data);

  DType dtype_ = DType::f32;
  Shape shape_;
  std::variant<std::vector<float>, std::vector<std::uint16_t>> data_;
};

/// Fixed-size part of an ESPT file.
struct TensorHeader {
  std::uint32_t version = 0;
  DType dtype = DType::f32;
  Shape shape;
  std::uint64_t header_bytes = 0;
  std::uint64_t payload_bytes = 0;
};

inline constexpr std::uint32_t kTensorFormatVersion = 1;

/// ESPT layout: "ESPT", u32 version, u8 dtype, u8 rank, rank x u64 dims,
/// row-major payload. All integers and elements little-endian.
std::vector<std::byte> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const std::byte> bytes, std::string_view source = "<memory>");

void write_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor read_tensor(const std::filesystem::path& path);
TensorHeader read_tensor_header(const std::filesystem::path& path);

struct ManifestLayer {
  std::string layer_id;
  std::string weight_path;
  std::string activation_path;
};

struct Manifest {
  std::string model_name;
  std::vector<ManifestLayer> layers;
  std::uint64_t token_count = 0;
  /// Directory relative paths are resolved against; not serialized.
  std::filesystem::path base_dir;

  const ManifestLayer& layer(std::string_view layer_id) const;
  std::filesystem::path resolve(const std::string& path) const;
};

/// Parses the JSON manifest and checks that ids are unique and every
/// referenced file carries a valid ESPT header.
Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

struct LayerBundle {
  std::string layer_id;
  Tensor weight;             // [C_out, C_in]
  Tensor calib_activations;  // [T, C_in]

  std::size_t out_channels() const { return weight.shape()[0]; }
  std::size_t in_channels() const { return weight.shape()[1]; }
  std::size_t tokens() const { return calib_activations.shape()[0]; }
};

/// Validates shapes and finiteness; throws ShapeError / ValidationError.
LayerBundle make_bundle(std::string layer_id, Tensor weight, Tensor activations);
LayerBundle load_bundle(const Manifest& manifest, std::string_view layer_id);

}  // namespace esparse
