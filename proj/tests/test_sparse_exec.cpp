#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "doctest.h"
#include "esparse/half.hpp"
#include "esparse/sparse_exec.hpp"
#include "oracles.hpp"

using namespace esparse;

namespace {

std::vector<std::size_t> identity_order(std::size_t n) {
  std::vector<std::size_t> o(n);
  std::iota(o.begin(), o.end(), std::size_t{0});
  return o;
}

// Random 2:4 mask, random f16 weight and random permutation.
struct Instance {
  Matrix<std::uint16_t> weight;
  Mask mask;
  std::vector<std::size_t> order;
};

Instance random_instance(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto w = testutil::gaussian(rows * cols, seed + 7);
  Instance in{Matrix<std::uint16_t>(rows, cols), Mask(rows, cols, 0), identity_order(cols)};
  for (std::size_t i = 0; i < w.size(); ++i) in.weight.data()[i] = float_to_half(w[i]);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t g = 0; g < cols; g += 4) {
      std::array<std::size_t, 4> slots{0, 1, 2, 3};
      std::shuffle(slots.begin(), slots.end(), rng);
      in.mask(r, g + slots[0]) = 1;
      in.mask(r, g + slots[1]) = 1;
    }
  }
  std::shuffle(in.order.begin(), in.order.end(), rng);
  return in;
}

}  // namespace

TEST_CASE("index nibbles for a row of two groups") {
  Matrix<std::uint16_t> w(1, 8);
  for (std::size_t c = 0; c < 8; ++c) w(0, c) = float_to_half(static_cast<float>(c + 1));
  const Mask m(1, 8, std::vector<std::uint8_t>{1, 0, 1, 0, 0, 1, 0, 1});
  const auto p = pack_permuted(w, m, identity_order(8));
  REQUIRE(p.indices.size() == 1);
  CHECK(p.indices[0] == 0xD8);
  CHECK(p.values == std::vector<std::uint16_t>{w(0, 0), w(0, 2), w(0, 5), w(0, 7)});
}

TEST_CASE("first two positions kept encode as 0b0100") {
  Matrix<std::uint16_t> w(2, 8, float_to_half(1.0f));
  const Mask m(2, 8, std::vector<std::uint8_t>{1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0});
  const auto p = pack_permuted(w, m, identity_order(8));
  CHECK(p.indices == std::vector<std::uint8_t>{0x44, 0x44});
}

TEST_CASE("odd group count pads the trailing nibble per row") {
  Matrix<std::uint16_t> w(2, 12, float_to_half(2.0f));
  Mask m(2, 12, 0);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t g = 0; g < 12; g += 4) {
      m(r, g + 2) = 1;
      m(r, g + 3) = 1;
    }
  }
  const auto p = pack_permuted(w, m, identity_order(12));
  CHECK(p.index_bytes_per_row() == 2);
  // 2 and 3 -> 0b1110
  CHECK(p.indices == std::vector<std::uint8_t>{0xEE, 0x0E, 0xEE, 0x0E});
  CHECK(check_invariants(p).empty());
}

TEST_CASE("pack rejects groups that do not keep exactly two") {
  const Matrix<std::uint16_t> w(1, 4, float_to_half(1.0f));
  CHECK_THROWS_AS(pack_permuted(w, Mask(1, 4, std::vector<std::uint8_t>{1, 1, 1, 0}), identity_order(4)),
                  ValidationError);
  CHECK_THROWS_AS(pack_permuted(w, Mask(1, 4, std::vector<std::uint8_t>{1, 0, 0, 0}), identity_order(4)),
                  ValidationError);
}

TEST_CASE("pack and unpack round-trip bit-exactly") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto in = random_instance(8, 32, seed);
    const auto p = pack_permuted(in.weight, in.mask, in.order);
    REQUIRE(check_invariants(p).empty());
    const auto back = unpack(p);
    for (std::size_t i = 0; i < back.size(); ++i) {
      REQUIRE(back.data()[i] == (in.mask.data()[i] ? in.weight.data()[i] : 0));
    }
    // dense view in original order
    const MatrixF dense = unpack_dense(p);
    for (std::size_t r = 0; r < 8; ++r) {
      for (std::size_t k = 0; k < 32; ++k) {
        const float want = in.mask(r, k) ? half_to_float(in.weight(r, k)) : 0.0f;
        REQUIRE(dense(r, in.order[k]) == want);
      }
    }
  }
}

TEST_CASE("sparse gemm equals the dense product of the unpacked weight") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto in = random_instance(16, 64, 300 + seed);
    const auto p = pack_permuted(in.weight, in.mask, in.order);
    const MatrixF x(32, 64, testutil::gaussian(32 * 64, seed));
    const MatrixF dense = unpack_dense(p);
    const MatrixF ys = sparse_gemm(p, x);
    const auto ref = oracle::matmul_xwt(x.storage(), dense.storage(), 32, 64, 16);
    long double num = 0;
    long double den = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      num += (ys.data()[i] - ref[i]) * (ys.data()[i] - ref[i]);
      den += ref[i] * ref[i];
    }
    CHECK(static_cast<double>(std::sqrt(num / den)) < 1e-5);
    const MatrixF yd = dense_gemm(dense, x);
    long double diff = 0;
    for (std::size_t i = 0; i < yd.size(); ++i) diff += (yd.data()[i] - ys.data()[i]) * (yd.data()[i] - ys.data()[i]);
    CHECK(static_cast<double>(std::sqrt(diff / den)) < 1e-5);
  }
}

TEST_CASE("zero activations give zero output") {
  const auto in = random_instance(4, 16, 1);
  const auto p = pack_permuted(in.weight, in.mask, in.order);
  const MatrixF y = sparse_gemm(p, MatrixF(5, 16, 0.0f));
  for (float v : y.data()) CHECK(v == 0.0f);
  CHECK_THROWS_AS(sparse_gemm(p, MatrixF(5, 12, 0.0f)), ShapeError);
}

TEST_CASE("permuted gather with a dense weight matches the original product") {
  const MatrixF w(8, 32, testutil::gaussian(256, 3));
  const MatrixF x(16, 32, testutil::gaussian(512, 4));
  std::vector<std::size_t> order = identity_order(32);
  std::shuffle(order.begin(), order.end(), std::mt19937_64(5));
  const MatrixF y = dense_gemm(w, x);
  const MatrixF yp = permuted_dense_gemm(permute_columns(w, order), order, x);
  long double num = 0;
  long double den = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    num += (yp.data()[i] - y.data()[i]) * (yp.data()[i] - y.data()[i]);
    den += y.data()[i] * y.data()[i];
  }
  CHECK(static_cast<double>(std::sqrt(num / den)) < 1e-6);
}

TEST_CASE("accounting for a full-size 2:4 weight") {
  const auto in = random_instance(64, 256, 2);
  const auto p = pack_permuted(in.weight, in.mask, in.order);
  const Accounting a = account(p, 128);
  CHECK(a.flop_ratio == 0.5);
  CHECK(a.flops_sparse * 2 == a.flops_dense);
  CHECK(a.bytes_dense == 64 * 256 * 2);
  CHECK(a.bytes_sparse == 64 * 256 + 64 * 256 / 8);
  CHECK(static_cast<double>(a.bytes_sparse) / static_cast<double>(a.bytes_dense) == 0.5625);
  CHECK(a.memory_saving == 0.4375);
}

TEST_CASE("accounting for a single group counts exact bytes") {
  const Matrix<std::uint16_t> w(1, 4, float_to_half(1.0f));
  const auto p = pack_permuted(w, Mask(1, 4, std::vector<std::uint8_t>{0, 1, 0, 1}), identity_order(4));
  const Accounting a = account(p, 1);
  CHECK(a.bytes_dense == 8);
  CHECK(a.bytes_sparse == 5);
  CHECK(a.memory_saving == 0.375);
}

TEST_CASE("ESPK encode and decode") {
  const auto in = random_instance(6, 24, 9);
  const auto p = pack_permuted(in.weight, in.mask, in.order);
  const auto bytes = encode_packed(p);
  CHECK(bytes.size() == packed_header_bytes(p) + p.value_bytes() + p.index_bytes());
  CHECK(packed_header_bytes(p) == 4 + 4 + 8 + 8 + 1 + 1 + 8 + 24 * 4);
  CHECK(static_cast<char>(bytes[0]) == 'E');
  CHECK(static_cast<char>(bytes[3]) == 'K');
  const auto back = decode_packed(bytes);
  CHECK(back.rows == p.rows);
  CHECK(back.cols == p.cols);
  CHECK(back.values == p.values);
  CHECK(back.indices == p.indices);
  CHECK(back.permutation == p.permutation);

  auto bad = bytes;
  bad[0] = std::byte{'X'};
  CHECK_THROWS_AS(decode_packed(bad), FormatError);
  CHECK_THROWS_AS(decode_packed(std::span(bytes).first(bytes.size() - 1)), FormatError);
}

TEST_CASE("invariant checks catch corruption") {
  const auto dir = testutil::fresh_dir("espk_corrupt");
  const auto in = random_instance(4, 16, 11);
  auto p = pack_permuted(in.weight, in.mask, in.order);
  write_packed(p, dir / "ok.espk");
  CHECK(read_packed(dir / "ok.espk").values == p.values);

  auto dup = p;
  dup.indices[0] = static_cast<std::uint8_t>((dup.indices[0] & 0xf0) | 0x5);  // positions 1 and 1
  CHECK_FALSE(check_invariants(dup).empty());
  CHECK_THROWS_AS(write_packed(dup, dir / "dup.espk"), ValidationError);

  auto perm = p;
  perm.permutation[0] = perm.permutation[1];
  CHECK_FALSE(check_invariants(perm).empty());

  auto nan = p;
  nan.values[3] = 0x7e00;
  CHECK_FALSE(check_invariants(nan).empty());

  // corrupt a nibble on disk and read it back
  auto bytes = encode_packed(p);
  bytes[bytes.size() - p.index_bytes()] = std::byte{0x00};
  {
    std::ofstream out(dir / "bad.espk", std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(read_packed(dir / "bad.espk"), ValidationError);
  CHECK_FALSE(check_invariants(read_packed(dir / "bad.espk", false)).empty());
}

TEST_CASE("only 2:4 packs") {
  PruneResult r;
  r.pattern = {4, 8};
  r.pruned_weight = Tensor::from_f32({1, 8}, std::vector<float>(8, 1.0f));
  r.mask_permuted = Mask(1, 8, 1);
  r.permutation = Permutation::identity(8);
  CHECK_THROWS_AS(pack(r), ValidationError);
}
