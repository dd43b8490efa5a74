#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "esparse/matrix.hpp"
#include "esparse/pruner.hpp"
#include "esparse/shuffle.hpp"

namespace esparse {

/// 2:4-compressed weight.
///
/// `values` holds the two kept f16 values of every group, row-major, in
/// permuted column order (rows x cols/2 entries). `indices` holds one nibble
/// per group: bits [1:0] are the position of the first kept value, bits
/// [3:2] of the second. The earlier group of a pair sits in the low nibble.
/// Every row starts on a fresh byte; an odd trailing nibble is zero.
struct PackedSparseWeight {
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  SparsityPattern pattern{2, 4};
  std::vector<std::uint16_t> values;
  std::vector<std::uint8_t> indices;
  std::vector<std::uint32_t> permutation;

  std::size_t groups_per_row() const noexcept { return cols / pattern.m_group; }
  std::size_t index_bytes_per_row() const noexcept { return (groups_per_row() + 1) / 2; }
  std::size_t value_bytes() const noexcept { return values.size() * sizeof(std::uint16_t); }
  std::size_t index_bytes() const noexcept { return indices.size(); }
};

/// Packs a permuted-order weight (f16 bits) under its permuted-order mask.
/// Throws ValidationError when a group does not keep exactly two values.
PackedSparseWeight pack_permuted(const Matrix<std::uint16_t>& weight_permuted, const Mask& mask_permuted,
                                 std::span<const std::size_t> order);

/// Packs a pruning result; f32 weights are rounded to f16.
PackedSparseWeight pack(const PruneResult& pruned);

/// Dense f16 bits in permuted order, zeros at pruned positions.
Matrix<std::uint16_t> unpack(const PackedSparseWeight& w);

/// Dense f32 weight in the original column order.
MatrixF unpack_dense(const PackedSparseWeight& w);

/// Reference dense layer: X [T, C] times W^T -> [T, C_out], f32 accumulation.
MatrixF dense_gemm(const MatrixF& weight, const MatrixF& activations);

/// Gathers X's columns through the permutation, then multiplies against the
/// kept values only. Same result as dense_gemm(unpack_dense(w), X).
MatrixF sparse_gemm(const PackedSparseWeight& w, const MatrixF& activations);

/// Gather-then-multiply with a dense permuted weight. With no pruning this
/// must match dense_gemm on the original weight.
MatrixF permuted_dense_gemm(const MatrixF& weight_permuted, std::span<const std::size_t> order,
                            const MatrixF& activations);

struct Accounting {
  std::uint64_t flops_dense = 0;
  std::uint64_t flops_sparse = 0;
  double flop_ratio = 0.0;
  std::uint64_t bytes_dense = 0;   // f16 dense weight
  std::uint64_t bytes_sparse = 0;  // values + indices, header excluded
  double memory_saving = 0.0;
};

/// FLOPs count a multiply-add as 2 for a batch of `tokens` rows.
Accounting account(const PackedSparseWeight& w, std::uint64_t tokens);

/// Invariant violations, empty when the weight is well formed.
std::vector<std::string> check_invariants(const PackedSparseWeight& w);

inline constexpr std::uint32_t kPackedFormatVersion = 1;

/// ESPK layout: "ESPK", u32 version, u64 rows, u64 cols, u8 n_keep,
/// u8 m_group, u64 permutation length, u32 indices, values (u16), index bytes.
/// Little-endian throughout.
std::vector<std::byte> encode_packed(const PackedSparseWeight& w);
/// Structural decode only: sizes and magic. Call check_invariants for the rest.
PackedSparseWeight decode_packed(std::span<const std::byte> bytes, std::string_view source = "<memory>");
std::uint64_t packed_header_bytes(const PackedSparseWeight& w);

void write_packed(const PackedSparseWeight& w, const std::filesystem::path& path);
/// Reads and, when `validate` is set, rejects files that break an invariant.
PackedSparseWeight read_packed(const std::filesystem::path& path, bool validate = true);

}  // namespace esparse
