#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <sstream>
#include <thread>
#include <vector>

#include "abq/bitplane.hpp"
#include "abq/core.hpp"
#include "abq/quantizer.hpp"

namespace abq {

/// Cache-blocking parameters. BM/BN/BK block the output and the shared
/// dimension; WM/WN are inner-tile sizes expressed in expanded (bit-plane)
/// rows/cols, mirroring the warp-tile convention they are derived from.
struct TileConfig {
  std::size_t BM = 64, BN = 64, BK = 512;
  std::size_t WM = 64, WN = 64, WK = 128;
  static constexpr std::size_t mma_m = 8, mma_n = 8, mma_k = 128;

  bool valid(unsigned p, unsigned q) const {
    if (WK != mma_k) return false;
    if (BK != 128 && BK != 256 && BK != 384 && BK != 512) return false;
    if (BK % WK != 0) return false;
    if (BM == 0 || BN == 0 || WM == 0 || WN == 0) return false;
    if (WM % mma_m != 0 || WN % mma_n != 0) return false;
    double warps = (double(BM) * p / double(WM)) * (double(BN) * q / double(WN));
    return warps >= 1.0 && warps <= 32.0;
  }

  void require_valid(unsigned p, unsigned q) const {
    if (!valid(p, q)) {
      std::ostringstream os;
      os << "TileConfig invalid for p=" << p << " q=" << q << ": BM=" << BM << " BN=" << BN
         << " BK=" << BK << " WM=" << WM << " WN=" << WN << " WK=" << WK;
      throw ValueError(os.str());
    }
  }

  std::string describe() const {
    std::ostringstream os;
    os << "BM" << BM << "_BN" << BN << "_BK" << BK << "_WM" << WM << "_WN" << WN;
    return os.str();
  }
};

/// A config that satisfies the warp-count window for any (p,q) in [1,8].
inline TileConfig default_tile(unsigned p, unsigned q) {
  TileConfig t;
  t.BM = 64;
  t.BN = 64;
  t.BK = 512;
  t.WM = 32 * p;  // 2 tiles along expanded rows
  t.WN = 32 * q;  // 2 tiles along expanded cols
  return t;
}

struct GemmStats {
  std::uint64_t block_tiles = 0;
  std::uint64_t plane_pair_products = 0;
};

struct GemmResult {
  Matrix<std::int32_t> acc;        // raw weighted popcount sums
  Matrix<std::int32_t> corrected;  // after zero-point correction
  Mat dequant;                     // after scale application
};

/// Largest value the weighted accumulation can reach: K*(2^p-1)*(2^q-1).
inline bool fits_int32(unsigned p, unsigned q, std::size_t k) {
  unsigned log_k = 0;
  while ((std::size_t{1} << log_k) < k + 1) ++log_k;
  return p + q + log_k <= 31;
}

/// Worker cap for gemm block-tile rows. Results are identical for any value;
/// 0 means use the machine's hardware concurrency.
inline unsigned& engine_threads() {
  static unsigned n = 0;
  return n;
}

namespace detail {

inline unsigned resolved_threads(std::size_t row_tiles) {
  unsigned n = engine_threads();
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return unsigned(std::min<std::size_t>(n, row_tiles));
}

template <typename Acc>
inline void gemm_plane_rows(const BitPlaneMatrix& a, const BitPlaneMatrix& bt,
                            const TileConfig& tile, unsigned p, unsigned q,
                            Matrix<Acc>& out, GemmStats* stats,
                            std::size_t m_begin, std::size_t m_end) {
  const std::size_t n = bt.rows;
  const std::size_t words = a.words_per_row;
  const std::size_t bk_words = tile.BK / 64;
  // inner tile sizes back in element space
  const std::size_t em = std::max<std::size_t>(1, tile.WM / p);
  const std::size_t en = std::max<std::size_t>(1, tile.WN / q);

  std::vector<std::int32_t> partial(tile.BM * tile.BN);

  for (std::size_t m0 = m_begin; m0 < m_end; m0 += tile.BM) {
    const std::size_t mb = std::min(tile.BM, m_end - m0);
    for (std::size_t n0 = 0; n0 < n; n0 += tile.BN) {
      const std::size_t nb = std::min(tile.BN, n - n0);
      if (stats) ++stats->block_tiles;
      for (unsigned s = 0; s < p; ++s) {
        for (unsigned t = 0; t < q; ++t) {
          if (stats) ++stats->plane_pair_products;
          std::fill(partial.begin(), partial.begin() + mb * nb, 0);
          for (std::size_t w0 = 0; w0 < words; w0 += bk_words) {
            const std::size_t wb = std::min(bk_words, words - w0);
            for (std::size_t i0 = 0; i0 < mb; i0 += em) {
              const std::size_t ib = std::min(em, mb - i0);
              for (std::size_t j0 = 0; j0 < nb; j0 += en) {
                const std::size_t jb = std::min(en, nb - j0);
                for (std::size_t i = 0; i < ib; ++i) {
                  const std::uint64_t* ra = a.row(s, m0 + i0 + i) + w0;
                  std::int32_t* prow = partial.data() + (i0 + i) * nb + j0;
                  for (std::size_t j = 0; j < jb; ++j) {
                    const std::uint64_t* rb = bt.row(t, n0 + j0 + j) + w0;
                    std::int32_t acc = 0;
                    for (std::size_t w = 0; w < wb; ++w)
                      acc += std::popcount(ra[w] & rb[w]);
                    prow[j] += acc;
                  }
                }
              }
            }
          }
          // bit reduction: fold this plane pair in with its stacked weight
          const Acc weight = Acc{1} << (s + t);
          for (std::size_t i = 0; i < mb; ++i)
            for (std::size_t j = 0; j < nb; ++j)
              out(m0 + i, n0 + j) += weight * Acc(partial[i * nb + j]);
        }
      }
    }
  }
}

/// Splits the block-tile rows across workers; each worker owns disjoint output
/// rows, so the result is bit-identical to the serial order.
template <typename Acc>
inline void gemm_planes(const BitPlaneMatrix& a, const BitPlaneMatrix& bt,
                        const TileConfig& tile, unsigned p, unsigned q,
                        Matrix<Acc>& out, GemmStats* stats) {
  const std::size_t m = a.rows;
  const std::size_t row_tiles = (m + tile.BM - 1) / tile.BM;
  const unsigned workers = resolved_threads(row_tiles);
  if (workers <= 1) {
    gemm_plane_rows(a, bt, tile, p, q, out, stats, 0, m);
    return;
  }
  std::vector<GemmStats> local(workers);
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    std::size_t r0 = row_tiles * w / workers, r1 = row_tiles * (w + 1) / workers;
    if (r0 == r1) continue;
    pool.emplace_back([&, w, r0, r1] {
      gemm_plane_rows(a, bt, tile, p, q, out, stats ? &local[w] : nullptr,
                      r0 * tile.BM, std::min(m, r1 * tile.BM));
    });
  }
  for (auto& th : pool) th.join();
  if (stats)
    for (const auto& s : local) {
      stats->block_tiles += s.block_tiles;
      stats->plane_pair_products += s.plane_pair_products;
    }
}

}  // namespace detail

/// Arbitrary-bit GEMM over bit planes: p*q 1-bit products recombined with
/// weights 2^(s+t). `bt` carries the right operand transposed (N x K) so the
/// inner loop walks contiguous words on both sides. Exact unsigned integer
/// product of the two code matrices.
inline Matrix<std::int32_t> gemm_arbitrary(const BitPlaneMatrix& a, const BitPlaneMatrix& bt,
                                           const TileConfig& tile, GemmStats* stats = nullptr) {
  if (a.cols != bt.cols) throw ShapeError("gemm_arbitrary: shared K dimension differs");
  tile.require_valid(a.planes, bt.planes);
  if (!fits_int32(a.planes, bt.planes, a.cols)) {
    std::ostringstream os;
    os << "gemm_arbitrary: p+q+ceil(log2(K+1)) = " << a.planes << "+" << bt.planes
       << "+log2(" << a.cols << "+1) exceeds 31; use gemm_arbitrary_wide";
    throw OverflowError(os.str());
  }
  Matrix<std::int32_t> out(a.rows, bt.rows, 0);
  detail::gemm_planes<std::int32_t>(a, bt, tile, a.planes, bt.planes, out, stats);
  return out;
}

/// 64-bit accumulator fallback for shapes past the 32-bit guard.
inline Matrix<std::int64_t> gemm_arbitrary_wide(const BitPlaneMatrix& a, const BitPlaneMatrix& bt,
                                                const TileConfig& tile,
                                                GemmStats* stats = nullptr) {
  if (a.cols != bt.cols) throw ShapeError("gemm_arbitrary_wide: shared K dimension differs");
  tile.require_valid(a.planes, bt.planes);
  Matrix<std::int64_t> out(a.rows, bt.rows, 0);
  detail::gemm_planes<std::int64_t>(a, bt, tile, a.planes, bt.planes, out, stats);
  return out;
}

/// Untiled reference path: same plane decomposition, no blocking. Kept as the
/// benchmarking baseline.
inline Matrix<std::int32_t> gemm_naive(const BitPlaneMatrix& a, const BitPlaneMatrix& bt) {
  if (a.cols != bt.cols) throw ShapeError("gemm_naive: shared K dimension differs");
  Matrix<std::int32_t> out(a.rows, bt.rows, 0);
  const std::size_t words = a.words_per_row;
  for (unsigned s = 0; s < a.planes; ++s)
    for (unsigned t = 0; t < bt.planes; ++t) {
      const std::int32_t weight = std::int32_t{1} << (s + t);
      for (std::size_t i = 0; i < a.rows; ++i) {
        const std::uint64_t* ra = a.row(s, i);
        for (std::size_t j = 0; j < bt.rows; ++j) {
          const std::uint64_t* rb = bt.row(t, j);
          std::int32_t acc = 0;
          for (std::size_t w = 0; w < words; ++w) acc += std::popcount(ra[w] & rb[w]);
          out(i, j) += weight * acc;
        }
      }
    }
  return out;
}

/// Undo the zero-point offset of both operands:
///   corrected[i][j] = acc - z_a[i]*colsum_b[j] - z_b[j]*rowsum_a[i] + K*z_a[i]*z_b[j]
template <typename Acc>
inline Matrix<Acc> zero_point_correct(const Matrix<Acc>& acc,
                                      const std::vector<std::int64_t>& rowsum_a,
                                      const std::vector<std::int64_t>& colsum_b,
                                      const std::vector<std::int32_t>& z_a,
                                      const std::vector<std::int32_t>& z_b, std::size_t k) {
  if (rowsum_a.size() != acc.rows || z_a.size() != acc.rows)
    throw ShapeError("zero_point_correct: row-side vectors do not match");
  if (colsum_b.size() != acc.cols || z_b.size() != acc.cols)
    throw ShapeError("zero_point_correct: col-side vectors do not match");
  Matrix<Acc> out(acc.rows, acc.cols);
  for (std::size_t i = 0; i < acc.rows; ++i)
    for (std::size_t j = 0; j < acc.cols; ++j) {
      std::int64_t v = std::int64_t(acc(i, j)) - std::int64_t(z_a[i]) * colsum_b[j] -
                       std::int64_t(z_b[j]) * rowsum_a[i] +
                       std::int64_t(k) * z_a[i] * z_b[j];
      out(i, j) = static_cast<Acc>(v);
    }
  return out;
}

inline std::vector<std::int64_t> code_rowsums(const CodeMat& codes) {
  std::vector<std::int64_t> sums(codes.rows, 0);
  for (std::size_t i = 0; i < codes.rows; ++i)
    for (std::size_t j = 0; j < codes.cols; ++j) sums[i] += codes(i, j);
  return sums;
}

/// Engine-path linear layer: activation codes (tokens x K, per-token params)
/// times weight codes (out x K, per-channel params), returning the
/// dequantized real product (tokens x out).
inline Mat quantized_linear(const QuantizedTensor& act, const QuantizedTensor& wt,
                            GemmStats* stats = nullptr) {
  if (act.cols() != wt.cols())
    throw ShapeError("quantized_linear: inner dimensions differ");
  const std::size_t k = act.cols();
  const unsigned p = act.spec.planes(), q = wt.spec.planes();

  BitPlaneMatrix a = bitpack(act.codes, p);
  BitPlaneMatrix bt = bitpack(wt.codes, q);
  TileConfig tile = default_tile(p, q);

  auto rows_a = code_rowsums(act.codes);
  auto cols_b = code_rowsums(wt.codes);  // wt is stored transposed
  std::vector<std::int32_t> z_a(act.rows()), z_b(wt.rows());
  std::vector<double> s_a(act.rows()), s_b(wt.rows());
  for (std::size_t i = 0; i < act.rows(); ++i) {
    std::size_t gi = act.axis_of(i, 0);
    z_a[i] = act.zero_points[gi];
    s_a[i] = act.scales[gi];
  }
  for (std::size_t j = 0; j < wt.rows(); ++j) {
    std::size_t gj = wt.axis_of(j, 0);
    z_b[j] = wt.zero_points[gj];
    s_b[j] = wt.scales[gj];
  }

  Mat dequant(act.rows(), wt.rows());
  if (fits_int32(p, q, k)) {
    auto acc = gemm_arbitrary(a, bt, tile, stats);
    auto corrected = zero_point_correct(acc, rows_a, cols_b, z_a, z_b, k);
    for (std::size_t i = 0; i < dequant.rows; ++i)
      for (std::size_t j = 0; j < dequant.cols; ++j)
        dequant(i, j) = s_a[i] * s_b[j] * corrected(i, j);
  } else {
    auto acc = gemm_arbitrary_wide(a, bt, tile, stats);
    auto corrected = zero_point_correct(acc, rows_a, cols_b, z_a, z_b, k);
    for (std::size_t i = 0; i < dequant.rows; ++i)
      for (std::size_t j = 0; j < dequant.cols; ++j)
        dequant(i, j) = s_a[i] * s_b[j] * corrected(i, j);
  }
  return dequant;
}

}  // namespace abq
