#pragma once

#include <cmath>
#include <vector>

#include "abq/core.hpp"
#include "abq/log.hpp"

namespace abq {

inline constexpr double kCosineFloor = 1e-12;
inline constexpr double kProbFloor = 1e-10;

namespace detail {

/// Cosine of two rows, clamped into [floor, 1] so the log stays finite.
inline double row_cosine(const Mat& a, const Mat& b, std::size_t row) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t j = 0; j < a.cols; ++j) {
    dot += a(row, j) * b(row, j);
    na += a(row, j) * a(row, j);
    nb += b(row, j) * b(row, j);
  }
  if (na == 0.0 || nb == 0.0) {
    log(LogLevel::Warn, "dlc_loss: zero-norm token row %zu, cosine floored", row);
    return kCosineFloor;
  }
  double c = dot / (std::sqrt(na) * std::sqrt(nb));
  if (c < kCosineFloor) return kCosineFloor;
  if (c > 1.0) return 1.0;
  return c;
}

/// Floor-and-renormalize a probability row.
inline std::vector<double> floored_row(const Mat& p, std::size_t row) {
  std::vector<double> out(p.cols);
  double sum = 0.0;
  for (std::size_t j = 0; j < p.cols; ++j) {
    out[j] = std::max(p(row, j), kProbFloor);
    sum += out[j];
  }
  for (double& v : out) v /= sum;
  return out;
}

inline void check_row_stochastic(const Mat& p, const char* what) {
  for (std::size_t i = 0; i < p.rows; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < p.cols; ++j) {
      if (p(i, j) < 0.0) throw ValueError(std::string(what) + ": negative probability");
      sum += p(i, j);
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw ValueError(std::string(what) + ": row " + std::to_string(i) +
                       " does not sum to 1 (got " + std::to_string(sum) + ")");
  }
}

}  // namespace detail

/// Distribution drift loss on a block output: per-token
/// -log cos(d_q, d_fp) - log cos(d_q, d_fp_star), averaged over tokens.
inline double dlc_loss(const Mat& d_q, const Mat& d_fp, const Mat& d_fp_star) {
  if (!d_q.same_shape(d_fp) || !d_q.same_shape(d_fp_star))
    throw ShapeError("dlc_loss: operand shapes differ");
  if (d_q.rows == 0) throw ValueError("dlc_loss: empty operands");
  double sum = 0.0;
  for (std::size_t i = 0; i < d_q.rows; ++i) {
    sum += -std::log(detail::row_cosine(d_q, d_fp, i));
    sum += -std::log(detail::row_cosine(d_q, d_fp_star, i));
  }
  return sum / double(d_q.rows);
}

/// Symmetric KL between two attention maps, per (head, query) row with a
/// probability floor, averaged over rows. Each Mat is one head's (query x key)
/// probability matrix.
inline double akl_loss(const std::vector<Mat>& attn_q, const std::vector<Mat>& attn_fp) {
  if (attn_q.size() != attn_fp.size() || attn_q.empty())
    throw ShapeError("akl_loss: head counts differ or empty");
  double sum = 0.0;
  std::size_t rows = 0;
  for (std::size_t h = 0; h < attn_q.size(); ++h) {
    if (!attn_q[h].same_shape(attn_fp[h])) throw ShapeError("akl_loss: head shapes differ");
    detail::check_row_stochastic(attn_q[h], "akl_loss(q)");
    detail::check_row_stochastic(attn_fp[h], "akl_loss(fp)");
    for (std::size_t i = 0; i < attn_q[h].rows; ++i) {
      auto pq = detail::floored_row(attn_q[h], i);
      auto pf = detail::floored_row(attn_fp[h], i);
      double kl = 0.0;
      for (std::size_t j = 0; j < pq.size(); ++j) {
        kl += pq[j] * std::log(pq[j] / pf[j]);
        kl += pf[j] * std::log(pf[j] / pq[j]);
      }
      sum += kl;
      ++rows;
    }
  }
  return sum / double(rows);
}

inline double akl_loss(const Mat& attn_q, const Mat& attn_fp) {
  return akl_loss(std::vector<Mat>{attn_q}, std::vector<Mat>{attn_fp});
}

struct BlockOutputs {
  Mat d_q;
  Mat d_fp;
  Mat d_fp_star;
  std::vector<Mat> attn_q;
  std::vector<Mat> attn_fp;
};

/// Combined objective: DLC + AKL with unit weights.
inline double total_loss(const BlockOutputs& out) {
  return dlc_loss(out.d_q, out.d_fp, out.d_fp_star) + akl_loss(out.attn_q, out.attn_fp);
}

}  // namespace abq
