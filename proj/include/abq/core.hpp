#pragma once

#include <cmath>
#include <cstdint>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace abq {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

class ValueError : public Error {
 public:
  explicit ValueError(const std::string& msg) : Error(msg) {}
};

class OverflowError : public Error {
 public:
  explicit OverflowError(const std::string& msg) : Error(msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

/// Dense row-major matrix. The one data container everything else builds on.
template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::size_t size() const { return rows * cols; }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  bool operator==(const Matrix& o) const {
    return rows == o.rows && cols == o.cols && data == o.data;
  }

  Matrix<T> transposed() const {
    Matrix<T> out(cols, rows);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j)
        out(j, i) = (*this)(i, j);
    return out;
  }
};

using Mat = Matrix<double>;
using CodeMat = Matrix<std::uint8_t>;
using IntMat = Matrix<std::int64_t>;

inline Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols != b.rows) throw ShapeError("matmul: inner dimensions differ");
  Mat out(a.rows, b.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    double d = std::abs(a.data[i] - b.data[i]);
    if (d > m) m = d;
  }
  return m;
}

inline double frobenius(const Mat& a) {
  double s = 0.0;
  for (double v : a.data) s += v * v;
  return std::sqrt(s);
}

/// Relative difference in Frobenius norm, guarded against a zero reference.
inline double rel_diff(const Mat& got, const Mat& want) {
  if (!got.same_shape(want)) throw ShapeError("rel_diff: shape mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < got.data.size(); ++i) {
    double d = got.data[i] - want.data[i];
    num += d * d;
    den += want.data[i] * want.data[i];
  }
  if (den == 0.0) return std::sqrt(num);
  return std::sqrt(num / den);
}

/// All randomness in the project flows through one of these, seeded explicitly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double gauss(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }
  std::uint64_t integer(std::uint64_t lo, std::uint64_t hi) {  // inclusive bounds
    return std::uniform_int_distribution<std::uint64_t>(lo, hi)(gen_);
  }

  Mat gauss_matrix(std::size_t r, std::size_t c, double stddev = 1.0) {
    Mat m(r, c);
    for (auto& v : m.data) v = gauss(0.0, stddev);
    return m;
  }
  CodeMat code_matrix(std::size_t r, std::size_t c, unsigned bits) {
    CodeMat m(r, c);
    for (auto& v : m.data) v = static_cast<std::uint8_t>(integer(0, (1u << bits) - 1));
    return m;
  }

  std::mt19937_64& raw() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

/// Round half away from zero. Tie behavior is part of the quantizer contract.
inline double round_half_away(double v) { return std::round(v); }

}  // namespace abq
