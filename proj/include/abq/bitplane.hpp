#pragma once

#include <bit>
#include <cstdint>
#include <sstream>
#include <vector>

#include "abq/core.hpp"

namespace abq {

/// p bit planes of an integer code matrix, each plane a row-major bitset
/// packed into 64-bit words. Tail bits past `cols` are kept zero so that
/// AND+popcount never sees garbage.
struct BitPlaneMatrix {
  unsigned planes = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t words_per_row = 0;
  std::vector<std::uint64_t> data;  // [plane][row][word]

  BitPlaneMatrix() = default;
  BitPlaneMatrix(unsigned p, std::size_t r, std::size_t c)
      : planes(p), rows(r), cols(c), words_per_row((c + 63) / 64),
        data(static_cast<std::size_t>(p) * r * words_per_row, 0) {}

  std::uint64_t* row(unsigned plane, std::size_t r) {
    return data.data() + (static_cast<std::size_t>(plane) * rows + r) * words_per_row;
  }
  const std::uint64_t* row(unsigned plane, std::size_t r) const {
    return data.data() + (static_cast<std::size_t>(plane) * rows + r) * words_per_row;
  }

  bool operator==(const BitPlaneMatrix& o) const {
    return planes == o.planes && rows == o.rows && cols == o.cols && data == o.data;
  }

  bool bit(unsigned plane, std::size_t r, std::size_t c) const {
    return (row(plane, r)[c / 64] >> (c % 64)) & 1u;
  }
  void set_bit(unsigned plane, std::size_t r, std::size_t c) {
    row(plane, r)[c / 64] |= (std::uint64_t{1} << (c % 64));
  }
};

/// Layout transform [M, K, p] -> [p, M, K]: plane s holds bit s of every code.
inline BitPlaneMatrix bitpack(const CodeMat& codes, unsigned bits) {
  if (bits < 1 || bits > 8) throw ValueError("bitpack: plane count must be in [1,8]");
  const unsigned max_code = (bits >= 8) ? 255u : ((1u << bits) - 1u);
  BitPlaneMatrix out(bits, codes.rows, codes.cols);
  for (std::size_t i = 0; i < codes.rows; ++i)
    for (std::size_t j = 0; j < codes.cols; ++j) {
      std::uint8_t c = codes(i, j);
      if (c > max_code) {
        std::ostringstream os;
        os << "bitpack: code " << int(c) << " at (" << i << "," << j << ") needs more than "
           << bits << " planes";
        throw ValueError(os.str());
      }
      for (unsigned s = 0; s < bits; ++s)
        if ((c >> s) & 1u) out.set_bit(s, i, j);
    }
  return out;
}

inline CodeMat unpack(const BitPlaneMatrix& m) {
  CodeMat codes(m.rows, m.cols);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) {
      std::uint8_t c = 0;
      for (unsigned s = 0; s < m.planes; ++s)
        if (m.bit(s, i, j)) c |= static_cast<std::uint8_t>(1u << s);
      codes(i, j) = c;
    }
  return codes;
}

/// 1-bit matrix product: out[i][j] = sum_k a[i][k] & b[j][k], popcounted
/// word by word. Both operands index the shared K dimension along words,
/// i.e. `b` is the column-major (transposed) side.
inline Matrix<std::int32_t> bmma(const BitPlaneMatrix& a, unsigned a_plane,
                                 const BitPlaneMatrix& bt, unsigned b_plane) {
  if (a.cols != bt.cols) throw ShapeError("bmma: shared K dimension differs");
  Matrix<std::int32_t> out(a.rows, bt.rows, 0);
  const std::size_t nw = a.words_per_row;
  for (std::size_t i = 0; i < a.rows; ++i) {
    const std::uint64_t* ra = a.row(a_plane, i);
    for (std::size_t j = 0; j < bt.rows; ++j) {
      const std::uint64_t* rb = bt.row(b_plane, j);
      std::int32_t acc = 0;
      for (std::size_t w = 0; w < nw; ++w) acc += std::popcount(ra[w] & rb[w]);
      out(i, j) = acc;
    }
  }
  return out;
}

}  // namespace abq
