#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "abq/gemm.hpp"

namespace abq {

/// Fraction of row work wasted when p*M rows are padded up to a multiple of
/// the instruction row count.
inline double padding_redundancy(std::size_t m, unsigned p, std::size_t mma_m) {
  if (m == 0 || p == 0 || mma_m == 0)
    throw ValueError("padding_redundancy: arguments must be positive");
  const std::size_t expanded = p * m;
  const std::size_t padded = (expanded + mma_m - 1) / mma_m * mma_m;
  return double(padded - expanded) / double(padded);
}

namespace detail {

/// Expert warp layouts (activation-side x weight-side warp counts).
inline const std::vector<std::pair<unsigned, unsigned>>& warp_layouts() {
  static const std::vector<std::pair<unsigned, unsigned>> layouts = {
      {1, 1}, {1, 2}, {1, 4}, {2, 2}, {2, 4}, {4, 4}};
  return layouts;
}

/// Total padded rows across all row blocks of size bm covering m rows.
inline std::size_t total_row_padding(std::size_t m, unsigned p, std::size_t bm,
                                     std::size_t mma_m) {
  std::size_t pad = 0;
  for (std::size_t m0 = 0; m0 < m; m0 += bm) {
    std::size_t mb = std::min(bm, m - m0);
    std::size_t expanded = p * mb;
    pad += (expanded + mma_m - 1) / mma_m * mma_m - expanded;
  }
  return pad;
}

}  // namespace detail

/// Candidate tile construction: pick a warp layout, pick inner-tile sizes from
/// the power-of-two grid, derive the block tile from the layout, then keep the
/// block heights with the least row padding for this (p, M).
inline std::vector<TileConfig> enumerate_tile_candidates(unsigned p, unsigned q, std::size_t m,
                                                         std::size_t n, std::size_t k) {
  if (p < 1 || p > 8 || q < 1 || q > 8)
    throw ValueError("enumerate_tile_candidates: p,q must be in [1,8]");
  (void)n;
  (void)k;
  static const std::size_t inner[] = {8, 16, 32, 64};
  static const std::size_t bks[] = {128, 256, 384, 512};

  std::set<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t, std::size_t>> seen;
  std::vector<TileConfig> raw;
  for (auto [lm, ln] : detail::warp_layouts())
    for (std::size_t wm : inner)
      for (std::size_t wn : inner)
        for (std::size_t bk : bks) {
          TileConfig t;
          t.WM = wm;
          t.WN = wn;
          t.WK = TileConfig::mma_k;
          t.BK = bk;
          t.BM = (lm * wm + p - 1) / p;  // smallest BM giving lm warps of height wm
          t.BN = (ln * wn + q - 1) / q;
          if (!t.valid(p, q)) continue;
          auto key = std::make_tuple(t.BM, t.BN, t.BK, t.WM, t.WN);
          if (!seen.insert(key).second) continue;
          raw.push_back(t);
        }

  // Appendix-style step 2: among equal inner tiles, prefer block heights with
  // the smallest redundant row padding for this problem's M.
  std::size_t best_pad = SIZE_MAX;
  for (const auto& t : raw)
    best_pad = std::min(best_pad, detail::total_row_padding(m, p, t.BM, TileConfig::mma_m));
  std::vector<TileConfig> out;
  for (const auto& t : raw)
    if (detail::total_row_padding(m, p, t.BM, TileConfig::mma_m) == best_pad) out.push_back(t);
  if (out.empty()) {
    // unreachable: the 1x1 layout with 8x8 inner tiles always validates
    out.push_back(default_tile(p, q));
  }
  return out;
}

struct BenchRecord {
  std::string config_id;
  std::size_t BM = 0, BN = 0, BK = 0, WM = 0, WN = 0;
  unsigned p = 0, q = 0;
  std::size_t M = 0, N = 0, K = 0;
  double median_us = 0.0;
  double tops = 0.0;  // 2*M*N*K ops over the median latency

  static std::string csv_header() {
    return "config_id,BM,BN,BK,WM,WN,p,q,M,N,K,median_us,tops";
  }
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

template <typename Fn>
inline double time_median_us(Fn&& fn, unsigned trials) {
  using clock = std::chrono::steady_clock;
  fn();  // warm-up, discarded
  std::vector<double> times;
  times.reserve(trials);
  for (unsigned t = 0; t < trials; ++t) {
    auto t0 = clock::now();
    fn();
    auto t1 = clock::now();
    times.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
  }
  return median(std::move(times));
}

inline double tops_of(std::size_t m, std::size_t n, std::size_t k, double us) {
  return 2.0 * double(m) * double(n) * double(k) / (us * 1e6);
}

}  // namespace detail

struct AutotuneResult {
  TileConfig best;
  std::vector<BenchRecord> records;
};

/// Time every candidate (median of `trials`, one discarded warm-up each),
/// verify its result against the first candidate bit for bit, and return the
/// fastest. A mismatching candidate is a hard failure.
inline AutotuneResult autotune(const std::vector<TileConfig>& candidates,
                               const BitPlaneMatrix& a, const BitPlaneMatrix& bt,
                               unsigned trials = 3) {
  if (candidates.empty()) throw ValueError("autotune: no candidates");
  if (trials < 3) throw ValueError("autotune: need at least 3 trials");

  const bool wide = !fits_int32(a.planes, bt.planes, a.cols);
  Matrix<std::int64_t> reference;

  AutotuneResult result;
  std::size_t best_idx = 0;
  for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
    const TileConfig& t = candidates[ci];
    t.require_valid(a.planes, bt.planes);
    Matrix<std::int64_t> got;
    auto run = [&] {
      if (wide) {
        got = gemm_arbitrary_wide(a, bt, t);
      } else {
        auto r32 = gemm_arbitrary(a, bt, t);
        got = Matrix<std::int64_t>(r32.rows, r32.cols);
        for (std::size_t i = 0; i < r32.data.size(); ++i) got.data[i] = r32.data[i];
      }
    };
    double us = detail::time_median_us(run, trials);
    if (ci == 0) {
      reference = got;
    } else if (!(got == reference)) {
      throw Error("autotune: config " + t.describe() + " disagrees with the reference result");
    }
    BenchRecord rec;
    rec.config_id = t.describe();
    rec.BM = t.BM;
    rec.BN = t.BN;
    rec.BK = t.BK;
    rec.WM = t.WM;
    rec.WN = t.WN;
    rec.p = a.planes;
    rec.q = bt.planes;
    rec.M = a.rows;
    rec.N = bt.rows;
    rec.K = a.cols;
    rec.median_us = us;
    rec.tops = detail::tops_of(rec.M, rec.N, rec.K, us);
    if (result.records.empty() || us < result.records[best_idx].median_us) best_idx = result.records.size();
    result.records.push_back(std::move(rec));
  }
  result.best = candidates[best_idx];
  return result;
}

}  // namespace abq
