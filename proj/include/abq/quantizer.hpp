#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <vector>

#include "abq/core.hpp"

namespace abq {

enum class Scheme : std::uint8_t { Asymmetric = 0, Symmetric = 1, Balanced = 2 };
enum class Granularity : std::uint8_t { PerTensor = 0, PerChannel = 1, PerToken = 2 };

inline const char* to_string(Scheme s) {
  switch (s) {
    case Scheme::Asymmetric: return "asymmetric";
    case Scheme::Symmetric: return "symmetric";
    case Scheme::Balanced: return "balanced";
  }
  return "?";
}

inline const char* to_string(Granularity g) {
  switch (g) {
    case Granularity::PerTensor: return "per-tensor";
    case Granularity::PerChannel: return "per-channel";
    case Granularity::PerToken: return "per-token";
  }
  return "?";
}

/// How to quantize one tensor: bit width, level scheme, scale granularity,
/// clip factors and the optional balance vector shared with the paired operand.
struct QuantSpec {
  unsigned bits = 8;
  Scheme scheme = Scheme::Asymmetric;
  Granularity granularity = Granularity::PerTensor;
  double alpha = 1.0;  // clip factor on the max side
  double beta = 1.0;   // clip factor on the min side
  std::vector<double> balance_scale;  // empty = no balancing

  /// bits >= 16 means "do not quantize"; used by calibration reference paths.
  bool passthrough() const { return bits >= 16; }

  /// Number of representable codes. Balanced keeps the extra symmetric level.
  unsigned levels() const {
    return scheme == Scheme::Balanced ? (1u << bits) + 1 : (1u << bits);
  }

  /// Bit planes the engine needs to carry every code of this spec.
  unsigned planes() const {
    unsigned L = levels();
    unsigned p = 0;
    while ((1u << p) < L) ++p;
    return p;
  }

  void validate() const {
    if (bits < 1 || (bits > 8 && !passthrough()))
      throw ValueError("QuantSpec: bits must be in [1,8] (or >=16 for passthrough)");
    if (scheme == Scheme::Balanced && bits > 7 && !passthrough())
      throw ValueError("QuantSpec: balanced codes reach 2^bits and must fit one byte, so bits <= 7");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ValueError("QuantSpec: alpha must be in (0,1]");
    if (!(beta > 0.0 && beta <= 1.0)) throw ValueError("QuantSpec: beta must be in (0,1]");
    for (double s : balance_scale)
      if (!(s > 0.0)) throw ValueError("QuantSpec: balance_scale entries must be positive");
  }
};

/// Weight compensation pair; a starts all-ones and b all-zeros so the
/// added outer product a*b^T is initially zero.
struct CompensationPair {
  std::vector<double> a;  // one entry per output row
  std::vector<double> b;  // one entry per input column
};

/// Integer codes plus the affine parameters needed to map them back to reals.
struct QuantizedTensor {
  CodeMat codes;
  std::vector<double> scales;       // one per axis group
  std::vector<std::int32_t> zero_points;
  QuantSpec spec;

  std::size_t rows() const { return codes.rows; }
  std::size_t cols() const { return codes.cols; }

  std::size_t axis_count() const { return scales.size(); }

  /// Axis group of element (i,j): 0 for per-tensor, i for row granularities.
  std::size_t axis_of(std::size_t i, std::size_t) const {
    return spec.granularity == Granularity::PerTensor ? 0 : i;
  }

  void validate() const {
    spec.validate();
    const unsigned max_code = spec.levels() - 1;
    for (std::size_t i = 0; i < codes.data.size(); ++i)
      if (codes.data[i] > max_code)
        throw ValueError("QuantizedTensor: code out of range at flat index " + std::to_string(i));
    std::size_t want = spec.granularity == Granularity::PerTensor ? 1 : codes.rows;
    if (scales.size() != want || zero_points.size() != want)
      throw ValueError("QuantizedTensor: scale/zero_point count does not match granularity");
  }
};

namespace detail {

struct AxisRange {
  double lo, hi;
};

/// Min/max per axis group. Row granularities group by row; per-tensor is one group.
inline std::vector<AxisRange> axis_ranges(const Mat& x, Granularity g) {
  std::size_t groups = g == Granularity::PerTensor ? 1 : x.rows;
  std::vector<AxisRange> r(groups, {std::numeric_limits<double>::infinity(),
                                    -std::numeric_limits<double>::infinity()});
  for (std::size_t i = 0; i < x.rows; ++i) {
    std::size_t gi = g == Granularity::PerTensor ? 0 : i;
    for (std::size_t j = 0; j < x.cols; ++j) {
      double v = x(i, j);
      r[gi].lo = std::min(r[gi].lo, v);
      r[gi].hi = std::max(r[gi].hi, v);
    }
  }
  return r;
}

inline void check_finite(const Mat& x, const char* what) {
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j)
      if (!std::isfinite(x(i, j))) {
        std::ostringstream os;
        os << what << ": non-finite element at (" << i << "," << j << ")";
        throw ValueError(os.str());
      }
}

}  // namespace detail

/// Round-clamp quantizer: codes = clamp(round((x + g*a*b^T)/step) + z, 0, L-1).
/// Step and zero point come from the clipped per-axis range
/// [beta*min, alpha*max]. Degenerate ranges use step 1 and zero point 0.
inline QuantizedTensor quantize(const Mat& x, const QuantSpec& spec,
                                const std::optional<CompensationPair>& comp = std::nullopt) {
  spec.validate();
  if (spec.passthrough()) throw ValueError("quantize: passthrough spec cannot be materialized");
  detail::check_finite(x, "quantize");

  Mat v = x;
  if (comp) {
    if (comp->a.size() != x.rows || comp->b.size() != x.cols)
      throw ShapeError("quantize: compensation pair does not match matrix shape");
    for (std::size_t i = 0; i < x.rows; ++i)
      for (std::size_t j = 0; j < x.cols; ++j) v(i, j) += comp->a[i] * comp->b[j];
  }

  const unsigned L = spec.levels();
  auto ranges = detail::axis_ranges(v, spec.granularity);

  QuantizedTensor q;
  q.spec = spec;
  q.codes = CodeMat(x.rows, x.cols);
  q.scales.resize(ranges.size());
  q.zero_points.resize(ranges.size());

  for (std::size_t gi = 0; gi < ranges.size(); ++gi) {
    double lo = spec.beta * ranges[gi].lo;
    double hi = spec.alpha * ranges[gi].hi;
    double step;
    std::int32_t z;
    if (spec.scheme == Scheme::Asymmetric) {
      if (hi == lo) {
        step = 1.0;
        z = 0;
      } else {
        step = (hi - lo) / static_cast<double>(L - 1);
        z = static_cast<std::int32_t>(std::clamp(round_half_away(-lo / step), 0.0,
                                                 static_cast<double>(L - 1)));
      }
    } else {
      // Symmetric and Balanced share a centered code layout.
      double amax = std::max(std::abs(lo), std::abs(hi));
      std::int32_t half = static_cast<std::int32_t>(1u << (spec.bits - 1));
      if (amax == 0.0) {
        step = 1.0;
        z = 0;
      } else {
        if (spec.scheme == Scheme::Balanced) {
          step = amax / static_cast<double>(half);
        } else {
          step = spec.bits == 1 ? amax : amax / static_cast<double>(half - 1);
        }
        z = half;
      }
    }
    q.scales[gi] = step;
    q.zero_points[gi] = z;
  }

  for (std::size_t i = 0; i < x.rows; ++i) {
    std::size_t gi = q.axis_of(i, 0);
    double step = q.scales[gi];
    double z = q.zero_points[gi];
    for (std::size_t j = 0; j < x.cols; ++j) {
      double c = round_half_away(v(i, j) / step) + z;
      q.codes(i, j) = static_cast<std::uint8_t>(std::clamp(c, 0.0, static_cast<double>(L - 1)));
    }
  }
  return q;
}

/// Balanced quantizer: signed levels {-2^(b-1), ..., 2^(b-1)} (2^b + 1 of them),
/// stored as unsigned codes offset by 2^(b-1).
inline QuantizedTensor quantize_balanced(const Mat& x, unsigned bits,
                                         Granularity granularity = Granularity::PerTensor) {
  QuantSpec spec;
  spec.bits = bits;
  spec.scheme = Scheme::Balanced;
  spec.granularity = granularity;
  return quantize(x, spec);
}

/// Eq-preserving rescale of a matmul pair: (W*diag(s), diag(s)^-1 * X).
/// W is (rows x K), X is (K x cols), s has length K.
inline std::pair<Mat, Mat> apply_balance(const Mat& w, const Mat& x,
                                         const std::vector<double>& s) {
  if (w.cols != s.size() || x.rows != s.size())
    throw ShapeError("apply_balance: s length must equal the shared inner dimension");
  for (std::size_t k = 0; k < s.size(); ++k)
    if (!(s[k] > 0.0))
      throw ValueError("apply_balance: s[" + std::to_string(k) + "] is not positive");
  Mat ws = w, xs = x;
  for (std::size_t i = 0; i < w.rows; ++i)
    for (std::size_t k = 0; k < w.cols; ++k) ws(i, k) *= s[k];
  for (std::size_t k = 0; k < x.rows; ++k)
    for (std::size_t j = 0; j < x.cols; ++j) xs(k, j) /= s[k];
  return {std::move(ws), std::move(xs)};
}

inline Mat dequantize(const QuantizedTensor& q) {
  q.validate();
  Mat out(q.rows(), q.cols());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    std::size_t gi = q.axis_of(i, 0);
    double step = q.scales[gi];
    double z = q.zero_points[gi];
    for (std::size_t j = 0; j < q.cols(); ++j)
      out(i, j) = (static_cast<double>(q.codes(i, j)) - z) * step;
  }
  return out;
}

}  // namespace abq
