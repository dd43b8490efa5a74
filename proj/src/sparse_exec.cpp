#include "esparse/sparse_exec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <fmt/core.h>

#include "esparse/half.hpp"

namespace esparse {
namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'E', 'S', 'P', 'K'};
constexpr SparsityPattern kTwoFour{2, 4};

void require_two_four(const SparsityPattern& pattern) {
  if (!(pattern == kTwoFour)) {
    throw ValidationError(fmt::format("packed format supports only 2:4, got {}", pattern.str()));
  }
}

template <typename T>
void put_le(std::vector<std::byte>& out, T value) {
  auto u = static_cast<std::make_unsigned_t<T>>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::byte>(u & 0xffu));
    u = static_cast<std::make_unsigned_t<T>>(u >> 8);
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

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b, std::string_view source) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) {
    throw FormatError(fmt::format("{}: size overflows 64 bits", source));
  }
  return a * b;
}

std::uint8_t nibble(const PackedSparseWeight& w, std::size_t row, std::size_t group) {
  const std::uint8_t byte = w.indices[row * w.index_bytes_per_row() + group / 2];
  return group % 2 == 0 ? (byte & 0x0fu) : (byte >> 4);
}

}  // namespace

PackedSparseWeight pack_permuted(const Matrix<std::uint16_t>& weight_permuted, const Mask& mask_permuted,
                                 std::span<const std::size_t> order) {
  const std::size_t rows = weight_permuted.rows();
  const std::size_t cols = weight_permuted.cols();
  if (mask_permuted.rows() != rows || mask_permuted.cols() != cols) throw ShapeError("mask shape differs from weight");
  if (order.size() != cols) throw ShapeError("permutation length differs from column count");
  if (cols % 4 != 0) throw ValidationError(fmt::format("column count {} is not divisible by 4", cols));

  PackedSparseWeight w;
  w.rows = rows;
  w.cols = cols;
  w.permutation.assign(order.begin(), order.end());
  w.values.reserve(rows * cols / 2);
  w.indices.assign(rows * w.index_bytes_per_row(), 0);

  for (std::size_t r = 0; r < rows; ++r) {
    const auto vals = weight_permuted.row(r);
    const auto keep = mask_permuted.row(r);
    for (std::size_t g = 0; g < cols / 4; ++g) {
      std::uint8_t code = 0;
      std::size_t kept = 0;
      for (std::size_t s = 0; s < 4; ++s) {
        if (!keep[4 * g + s]) continue;
        if (kept < 2) {
          code = static_cast<std::uint8_t>(code | (s << (2 * kept)));
          w.values.push_back(vals[4 * g + s]);
        }
        ++kept;
      }
      if (kept != 2) {
        throw ValidationError(fmt::format("row {} group {} keeps {} values, 2:4 requires exactly 2", r, g, kept));
      }
      auto& byte = w.indices[r * w.index_bytes_per_row() + g / 2];
      byte = static_cast<std::uint8_t>(byte | (g % 2 == 0 ? code : code << 4));
    }
  }
  return w;
}

PackedSparseWeight pack(const PruneResult& pruned) {
  require_two_four(pruned.pattern);
  const Tensor& t = pruned.pruned_weight;
  if (t.rank() != 2) throw ShapeError("pruned weight must be rank 2");
  std::vector<std::uint16_t> bits;
  if (t.dtype() == DType::f16) {
    bits.assign(t.f16_bits().begin(), t.f16_bits().end());
  } else {
    bits.resize(t.numel());
    std::transform(t.f32().begin(), t.f32().end(), bits.begin(), float_to_half);
  }
  const Matrix<std::uint16_t> dense(t.shape()[0], t.shape()[1], std::move(bits));
  return pack_permuted(permute_columns(dense, pruned.permutation.order), pruned.mask_permuted,
                       pruned.permutation.order);
}

Matrix<std::uint16_t> unpack(const PackedSparseWeight& w) {
  Matrix<std::uint16_t> out(w.rows, w.cols, 0);
  const std::size_t groups = w.groups_per_row();
  for (std::size_t r = 0; r < w.rows; ++r) {
    auto row = out.row(r);
    for (std::size_t g = 0; g < groups; ++g) {
      const std::uint8_t code = nibble(w, r, g);
      const std::size_t base = (r * groups + g) * 2;
      row[4 * g + (code & 0x3u)] = w.values[base];
      row[4 * g + ((code >> 2) & 0x3u)] = w.values[base + 1];
    }
  }
  return out;
}

MatrixF unpack_dense(const PackedSparseWeight& w) {
  const Matrix<std::uint16_t> bits = unpack(w);
  MatrixF permuted(w.rows, w.cols);
  std::transform(bits.data().begin(), bits.data().end(), permuted.data().begin(), half_to_float);
  std::vector<std::size_t> order(w.permutation.begin(), w.permutation.end());
  return unpermute_columns(permuted, order);
}

MatrixF dense_gemm(const MatrixF& weight, const MatrixF& activations) {
  if (activations.cols() != weight.cols()) {
    throw ShapeError(fmt::format("activations have {} channels, weight expects {}", activations.cols(), weight.cols()));
  }
  MatrixF out(activations.rows(), weight.rows());
  for (std::size_t t = 0; t < activations.rows(); ++t) {
    const auto x = activations.row(t);
    auto y = out.row(t);
    for (std::size_t r = 0; r < weight.rows(); ++r) {
      const auto wr = weight.row(r);
      float acc = 0.0f;
      for (std::size_t c = 0; c < wr.size(); ++c) acc += x[c] * wr[c];
      y[r] = acc;
    }
  }
  return out;
}

MatrixF sparse_gemm(const PackedSparseWeight& w, const MatrixF& activations) {
  if (activations.cols() != w.cols) {
    throw ShapeError(fmt::format("activations have {} channels, packed weight expects {}", activations.cols(), w.cols));
  }
  std::vector<std::size_t> order(w.permutation.begin(), w.permutation.end());
  const MatrixF gathered = permute_columns(activations, order);

  std::vector<float> values(w.values.size());
  std::transform(w.values.begin(), w.values.end(), values.begin(), half_to_float);

  const std::size_t groups = w.groups_per_row();
  MatrixF out(activations.rows(), w.rows);
  for (std::size_t t = 0; t < gathered.rows(); ++t) {
    const auto x = gathered.row(t);
    auto y = out.row(t);
    for (std::size_t r = 0; r < w.rows; ++r) {
      const float* v = values.data() + r * groups * 2;
      const std::uint8_t* idx = w.indices.data() + r * w.index_bytes_per_row();
      float acc = 0.0f;
      for (std::size_t g = 0; g < groups; ++g) {
        const std::uint8_t code = g % 2 == 0 ? (idx[g / 2] & 0x0fu) : (idx[g / 2] >> 4);
        const float* xg = x.data() + 4 * g;
        acc += v[2 * g] * xg[code & 0x3u];
        acc += v[2 * g + 1] * xg[(code >> 2) & 0x3u];
      }
      y[r] = acc;
    }
  }
  return out;
}

MatrixF permuted_dense_gemm(const MatrixF& weight_permuted, std::span<const std::size_t> order,
                            const MatrixF& activations) {
  return dense_gemm(weight_permuted, permute_columns(activations, order));
}

Accounting account(const PackedSparseWeight& w, std::uint64_t tokens) {
  Accounting a;
  a.flops_dense = 2 * tokens * w.rows * w.cols;
  a.flops_sparse = 2 * tokens * w.rows * (w.cols / w.pattern.m_group * w.pattern.n_keep);
  a.flop_ratio = static_cast<double>(w.pattern.n_keep) / static_cast<double>(w.pattern.m_group);
  a.bytes_dense = w.rows * w.cols * sizeof(std::uint16_t);
  a.bytes_sparse = w.value_bytes() + w.index_bytes();
  a.memory_saving = a.bytes_dense == 0 ? 0.0
                                       : 1.0 - static_cast<double>(a.bytes_sparse) / static_cast<double>(a.bytes_dense);
  return a;
}

std::vector<std::string> check_invariants(const PackedSparseWeight& w) {
  std::vector<std::string> problems;
  if (!(w.pattern == kTwoFour)) {
    problems.push_back(fmt::format("pattern {} is not 2:4", w.pattern.str()));
    return problems;
  }
  if (w.cols % 4 != 0) {
    problems.push_back(fmt::format("column count {} is not divisible by 4", w.cols));
    return problems;
  }
  if (w.values.size() != w.rows * w.cols / 2) {
    problems.push_back(fmt::format("values buffer holds {} entries, expected {}", w.values.size(), w.rows * w.cols / 2));
  }
  if (w.indices.size() != w.rows * w.index_bytes_per_row()) {
    problems.push_back(
        fmt::format("index buffer holds {} bytes, expected {}", w.indices.size(), w.rows * w.index_bytes_per_row()));
    return problems;
  }
  if (w.permutation.size() != w.cols) {
    problems.push_back(fmt::format("permutation has {} entries for {} columns", w.permutation.size(), w.cols));
  } else {
    std::vector<char> seen(w.cols, 0);
    for (auto idx : w.permutation) {
      if (idx >= w.cols || seen[idx]) {
        problems.push_back("permutation is not a bijection");
        break;
      }
      seen[idx] = 1;
    }
  }
  const std::size_t groups = w.groups_per_row();
  std::size_t reported = 0;
  for (std::size_t r = 0; r < w.rows && reported < 16; ++r) {
    for (std::size_t g = 0; g < groups && reported < 16; ++g) {
      const std::uint8_t code = nibble(w, r, g);
      const unsigned first = code & 0x3u;
      const unsigned second = (code >> 2) & 0x3u;
      if (first >= second) {
        problems.push_back(fmt::format("row {} group {}: index nibble {:#06b} is not strictly increasing ({} then {})",
                                       r, g, code, first, second));
        ++reported;
      }
    }
    if (groups % 2 == 1 && (w.indices[r * w.index_bytes_per_row() + groups / 2] >> 4) != 0) {
      problems.push_back(fmt::format("row {}: padding nibble is not zero", r));
      ++reported;
    }
  }
  for (std::size_t i = 0; i < w.values.size(); ++i) {
    if (!half_is_finite(w.values[i])) {
      problems.push_back(fmt::format("value {} is not finite", i));
      break;
    }
  }
  return problems;
}

std::uint64_t packed_header_bytes(const PackedSparseWeight& w) {
  return 4 + 4 + 8 + 8 + 1 + 1 + 8 + 4ull * w.permutation.size();
}

std::vector<std::byte> encode_packed(const PackedSparseWeight& w) {
  std::vector<std::byte> out;
  out.reserve(packed_header_bytes(w) + w.value_bytes() + w.index_bytes());
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  put_le<std::uint32_t>(out, kPackedFormatVersion);
  put_le<std::uint64_t>(out, w.rows);
  put_le<std::uint64_t>(out, w.cols);
  out.push_back(static_cast<std::byte>(w.pattern.n_keep));
  out.push_back(static_cast<std::byte>(w.pattern.m_group));
  put_le<std::uint64_t>(out, w.permutation.size());
  for (auto idx : w.permutation) put_le<std::uint32_t>(out, idx);
  for (auto v : w.values) put_le<std::uint16_t>(out, v);
  for (auto b : w.indices) out.push_back(static_cast<std::byte>(b));
  return out;
}

PackedSparseWeight decode_packed(std::span<const std::byte> bytes, std::string_view source) {
  constexpr std::size_t kFixed = 4 + 4 + 8 + 8 + 1 + 1 + 8;
  if (bytes.size() < kFixed) {
    throw FormatError(fmt::format("{}: truncated header: expected at least {} bytes, got {}", source, kFixed,
                                  bytes.size()));
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(fmt::format("{}: bad magic, not an ESPK file", source));
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kPackedFormatVersion) throw FormatError(fmt::format("{}: unsupported version {}", source, version));

  PackedSparseWeight w;
  w.rows = get_le<std::uint64_t>(bytes, 8);
  w.cols = get_le<std::uint64_t>(bytes, 16);
  w.pattern.n_keep = static_cast<std::uint8_t>(bytes[24]);
  w.pattern.m_group = static_cast<std::uint8_t>(bytes[25]);
  const auto perm_len = get_le<std::uint64_t>(bytes, 26);
  if (!(w.pattern == kTwoFour)) {
    throw FormatError(fmt::format("{}: unsupported pattern {}", source, w.pattern.str()));
  }
  if (w.cols % 4 != 0) throw FormatError(fmt::format("{}: column count {} is not divisible by 4", source, w.cols));
  if (perm_len != w.cols) {
    throw FormatError(fmt::format("{}: permutation length {} differs from column count {}", source, perm_len, w.cols));
  }

  const std::uint64_t header = kFixed + checked_mul(4, perm_len, source);
  const std::uint64_t value_bytes = checked_mul(checked_mul(w.rows, w.cols / 2, source), 2, source);
  const std::uint64_t index_bytes = checked_mul(w.rows, w.index_bytes_per_row(), source);
  const std::uint64_t expected = header + value_bytes + index_bytes;
  if (expected < header || bytes.size() != expected) {
    throw FormatError(
        fmt::format("{}: size mismatch: expected {} bytes, got {}", source, expected, bytes.size()));
  }

  w.permutation.resize(perm_len);
  for (std::size_t i = 0; i < perm_len; ++i) w.permutation[i] = get_le<std::uint32_t>(bytes, kFixed + 4 * i);
  w.values.resize(value_bytes / 2);
  for (std::size_t i = 0; i < w.values.size(); ++i) w.values[i] = get_le<std::uint16_t>(bytes, header + 2 * i);
  w.indices.resize(index_bytes);
  for (std::size_t i = 0; i < index_bytes; ++i) {
    w.indices[i] = static_cast<std::uint8_t>(bytes[header + value_bytes + i]);
  }
  return w;
}

void write_packed(const PackedSparseWeight& w, const fs::path& path) {
  const auto problems = check_invariants(w);
  if (!problems.empty()) throw ValidationError(fmt::format("refusing to write invalid packed weight: {}", problems[0]));
  const auto bytes = encode_packed(w);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(fmt::format("failed writing '{}'", path.string()));
}

PackedSparseWeight read_packed(const fs::path& path, bool validate) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open '{}' for reading", path.string()));
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::span<const std::byte> bytes(reinterpret_cast<const std::byte*>(raw.data()), raw.size());
  PackedSparseWeight w = decode_packed(bytes, path.string());
  if (validate) {
    const auto problems = check_invariants(w);
    if (!problems.empty()) throw ValidationError(fmt::format("{}: {}", path.string(), problems[0]));
  }
  return w;
}

}  // namespace esparse
