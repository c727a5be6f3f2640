#include <catch2/catch_amalgamated.hpp>

#include <cstdint>

#include "abq/gemm.hpp"

using namespace abq;

namespace {

// Plain 64-bit integer matmul over the codes; the oracle every engine path
// must match exactly. b holds the right operand transposed (N x K).
IntMat naive_codes(const CodeMat& a, const CodeMat& bt) {
  IntMat out(a.rows, bt.rows, 0);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < bt.rows; ++j) {
      std::int64_t acc = 0;
      for (std::size_t k = 0; k < a.cols; ++k)
        acc += std::int64_t(a(i, k)) * std::int64_t(bt(j, k));
      out(i, j) = acc;
    }
  return out;
}

// Triple loop over single bits, the most literal reading of a 1-bit product.
std::int64_t naive_bmma(const BitPlaneMatrix& a, unsigned s, const BitPlaneMatrix& bt,
                        unsigned t, std::size_t i, std::size_t j) {
  std::int64_t acc = 0;
  for (std::size_t k = 0; k < a.cols; ++k)
    acc += std::int64_t(a.bit(s, i, k) & bt.bit(t, j, k));
  return acc;
}

}  // namespace

TEST_CASE("bitpack round trips and rejects out-of-range codes", "[bitkernel]") {
  Rng rng(21);
  for (unsigned bits = 1; bits <= 8; ++bits) {
    CodeMat c = rng.code_matrix(5, 70, bits);
    BitPlaneMatrix m = bitpack(c, bits);
    REQUIRE(m.planes == bits);
    REQUIRE(unpack(m) == c);
  }
  CodeMat bad(2, 3, 0);
  bad(1, 2) = 4;
  try {
    bitpack(bad, 2);
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    REQUIRE(std::string(e.what()).find("(1,2)") != std::string::npos);
  }
}

TEST_CASE("bmma equals the bit-level triple loop", "[bitkernel]") {
  Rng rng(22);
  CodeMat a = rng.code_matrix(4, 130, 3);
  CodeMat b = rng.code_matrix(5, 130, 2);
  BitPlaneMatrix pa = bitpack(a, 3), pb = bitpack(b, 2);
  for (unsigned s = 0; s < 3; ++s)
    for (unsigned t = 0; t < 2; ++t) {
      auto got = bmma(pa, s, pb, t);
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 5; ++j)
          REQUIRE(std::int64_t(got(i, j)) == naive_bmma(pa, s, pb, t, i, j));
    }
}

TEST_CASE("gemm_arbitrary equals the integer oracle", "[bitkernel]") {
  Rng rng(23);
  for (int trial = 0; trial < 60; ++trial) {
    std::size_t m = rng.integer(1, 48), n = rng.integer(1, 48), k = rng.integer(1, 200);
    unsigned p = unsigned(rng.integer(1, 8)), q = unsigned(rng.integer(1, 8));
    CodeMat a = rng.code_matrix(m, k, p);
    CodeMat b = rng.code_matrix(n, k, q);
    auto got = gemm_arbitrary(bitpack(a, p), bitpack(b, q), default_tile(p, q));
    IntMat want = naive_codes(a, b);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) REQUIRE(std::int64_t(got(i, j)) == want(i, j));
  }
}

TEST_CASE("gemm_naive agrees with gemm_arbitrary", "[bitkernel]") {
  Rng rng(24);
  CodeMat a = rng.code_matrix(9, 300, 5);
  CodeMat b = rng.code_matrix(11, 300, 3);
  auto pa = bitpack(a, 5), pb = bitpack(b, 3);
  REQUIRE(gemm_naive(pa, pb) == gemm_arbitrary(pa, pb, default_tile(5, 3)));
}

TEST_CASE("overflow guard boundary", "[bitkernel]") {
  // p+q+ceil(log2(K+1)) == 31 passes, 32 throws
  REQUIRE(fits_int32(8, 8, (std::size_t{1} << 15) - 1));
  REQUIRE_FALSE(fits_int32(8, 8, std::size_t{1} << 15));
  Rng rng(25);
  std::size_t k = std::size_t{1} << 15;
  CodeMat a = rng.code_matrix(1, k, 8);
  CodeMat b = rng.code_matrix(1, k, 8);
  auto pa = bitpack(a, 8), pb = bitpack(b, 8);
  REQUIRE_THROWS_AS(gemm_arbitrary(pa, pb, default_tile(8, 8)), OverflowError);
  auto wide = gemm_arbitrary_wide(pa, pb, default_tile(8, 8));
  REQUIRE(wide(0, 0) == naive_codes(a, b)(0, 0));
}

TEST_CASE("tile configurations are transparent", "[bitkernel]") {
  Rng rng(26);
  CodeMat a = rng.code_matrix(33, 500, 3);
  CodeMat b = rng.code_matrix(29, 500, 5);
  auto pa = bitpack(a, 3), pb = bitpack(b, 5);
  auto want = gemm_arbitrary(pa, pb, default_tile(3, 5));
  for (std::size_t bm : {8, 16, 64})
    for (std::size_t bk : {128, 256, 512}) {
      TileConfig t{bm, 32, bk, 24, 40, 128};
      REQUIRE(gemm_arbitrary(pa, pb, t) == want);
    }
}

TEST_CASE("invalid tile configurations are rejected", "[bitkernel]") {
  REQUIRE_THROWS_AS((TileConfig{8, 8, 100, 8, 8, 128}.require_valid(1, 1)), ValueError);
  REQUIRE_THROWS_AS((TileConfig{8, 8, 128, 8, 8, 64}.require_valid(1, 1)), ValueError);
  REQUIRE_THROWS_AS((TileConfig{8, 8, 128, 12, 8, 128}.require_valid(1, 1)), ValueError);
  // warp product above 32
  REQUIRE_THROWS_AS((TileConfig{512, 512, 128, 8, 8, 128}.require_valid(1, 1)), ValueError);
  REQUIRE_NOTHROW((TileConfig{64, 64, 512, 32, 32, 128}.require_valid(1, 1)));
}

TEST_CASE("zero-point correction equals the signed oracle", "[bitkernel]") {
  Rng rng(27);
  for (int trial = 0; trial < 20; ++trial) {
    std::size_t m = rng.integer(1, 10), n = rng.integer(1, 10), k = rng.integer(1, 64);
    unsigned p = 4, q = 4;
    CodeMat a = rng.code_matrix(m, k, p);
    CodeMat b = rng.code_matrix(n, k, q);
    std::vector<std::int32_t> za, zb;
    for (std::size_t i = 0; i < m; ++i) za.push_back(std::int32_t(rng.integer(0, 15)));
    for (std::size_t j = 0; j < n; ++j) zb.push_back(std::int32_t(rng.integer(0, 15)));

    auto acc = gemm_arbitrary(bitpack(a, p), bitpack(b, q), default_tile(p, q));
    auto corrected = zero_point_correct(acc, code_rowsums(a), code_rowsums(b), za, zb, k);

    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        std::int64_t want = 0;
        for (std::size_t kk = 0; kk < k; ++kk)
          want += (std::int64_t(a(i, kk)) - za[i]) * (std::int64_t(b(j, kk)) - zb[j]);
        REQUIRE(std::int64_t(corrected(i, j)) == want);
      }
  }
}

TEST_CASE("quantized_linear equals the dequantized-code product", "[bitkernel]") {
  Rng rng(28);
  Mat x = rng.gauss_matrix(6, 64);
  Mat w = rng.gauss_matrix(9, 64);
  QuantSpec sa;
  sa.bits = 5;
  sa.granularity = Granularity::PerToken;
  QuantSpec sw;
  sw.bits = 3;
  sw.granularity = Granularity::PerChannel;
  QuantizedTensor qa = quantize(x, sa), qw = quantize(w, sw);

  GemmStats stats;
  Mat got = quantized_linear(qa, qw, &stats);
  Mat want = matmul(dequantize(qa), dequantize(qw).transposed());
  REQUIRE(max_abs_diff(got, want) < 1e-9);
  REQUIRE(stats.plane_pair_products > 0);
  REQUIRE(stats.block_tiles > 0);
}

TEST_CASE("gemm stats count plane pairs per block tile", "[bitkernel]") {
  Rng rng(29);
  CodeMat a = rng.code_matrix(70, 128, 2);
  CodeMat b = rng.code_matrix(70, 128, 3);
  GemmStats stats;
  TileConfig t{32, 32, 128, 32, 32, 128};
  gemm_arbitrary(bitpack(a, 2), bitpack(b, 3), t, &stats);
  std::uint64_t tiles = 3 * 3;  // ceil(70/32)^2
  REQUIRE(stats.block_tiles == tiles);
  REQUIRE(stats.plane_pair_products == tiles * 2 * 3);
}
