#pragma once

#include <cmath>
#include <vector>

#include "abq/core.hpp"

namespace abq::ad {

// Small eager reverse-mode tape over Mat values, built for the calibration
// forward. Nodes with discrete decisions (round, clamp, row max/min) record
// them at build time; replay() re-evaluates the whole graph with those
// decisions frozen, which makes the surrogate smooth in the parameters and
// lets finite differences validate the straight-through gradients.

enum class Op {
  Param,
  Const,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  MatMul,
  Transpose,
  Exp,
  Log,
  Sqrt,
  Sigmoid,
  RoundSte,
  ClampSte,
  RowMax,
  RowMin,
  RowSum,
  MeanAll,
  SoftmaxRows,
  SliceCols,
  ConcatCols,
  MaxElem,  // elementwise max of two same-shape operands
};

struct Node {
  Op op;
  std::vector<int> in;
  Mat value;
  Mat grad;
  Mat residual;                    // RoundSte: round(v) - v at record time
  std::vector<std::uint8_t> side;  // ClampSte: 0 below, 1 inside, 2 above
  std::vector<std::size_t> pick;   // RowMax/RowMin: chosen column per row
  double lo = 0.0, hi = 0.0;       // clamp bounds
  std::size_t c_lo = 0, width = 0; // slice window
};

class Tape;

struct Val {
  Tape* tape = nullptr;
  int id = -1;
};

class Tape {
 public:
  std::vector<Node> nodes;

  Val param(Mat m) { return leaf(Op::Param, std::move(m)); }
  Val constant(Mat m) { return leaf(Op::Const, std::move(m)); }
  Val scalar(double v) { return constant(Mat(1, 1, v)); }

  Mat& value(Val v) { return nodes[v.id].value; }
  const Mat& grad(Val v) const { return nodes[v.id].grad; }

  Val push(Op op, std::vector<int> in, double lo = 0.0, double hi = 0.0,
           std::size_t c_lo = 0, std::size_t width = 0) {
    Node n;
    n.op = op;
    n.in = std::move(in);
    n.lo = lo;
    n.hi = hi;
    n.c_lo = c_lo;
    n.width = width;
    nodes.push_back(std::move(n));
    eval(nodes.back(), /*replay=*/false);
    return Val{this, int(nodes.size()) - 1};
  }

  /// Re-evaluate every node with the recorded discrete decisions frozen.
  /// Leaf values may be edited in place beforehand.
  void replay() {
    for (auto& n : nodes) eval(n, /*replay=*/true);
  }

  void backward(Val loss) {
    for (auto& n : nodes) n.grad = Mat(n.value.rows, n.value.cols, 0.0);
    Node& top = nodes[loss.id];
    if (top.value.size() != 1) throw ShapeError("backward: loss must be scalar");
    top.grad(0, 0) = 1.0;
    for (int i = int(nodes.size()) - 1; i >= 0; --i) prop(nodes[i]);
  }

 private:
  Val leaf(Op op, Mat m) {
    Node n;
    n.op = op;
    n.value = std::move(m);
    nodes.push_back(std::move(n));
    return Val{this, int(nodes.size()) - 1};
  }

  static double bval(const Mat& b, std::size_t i, std::size_t j) {
    return b(b.rows == 1 ? 0 : i, b.cols == 1 ? 0 : j);
  }
  static bool broadcastable(const Mat& a, const Mat& b) {
    return (b.rows == a.rows || b.rows == 1) && (b.cols == a.cols || b.cols == 1);
  }

  void eval(Node& n, bool replay) {
    auto& N = nodes;
    switch (n.op) {
      case Op::Param:
      case Op::Const:
        return;
      case Op::Add:
      case Op::Sub:
      case Op::Mul:
      case Op::Div: {
        const Mat& a = N[n.in[0]].value;
        const Mat& b = N[n.in[1]].value;
        if (!broadcastable(a, b)) throw ShapeError("tape: operands not broadcastable");
        n.value = Mat(a.rows, a.cols);
        for (std::size_t i = 0; i < a.rows; ++i)
          for (std::size_t j = 0; j < a.cols; ++j) {
            double x = a(i, j), y = bval(b, i, j);
            n.value(i, j) = n.op == Op::Add   ? x + y
                            : n.op == Op::Sub ? x - y
                            : n.op == Op::Mul ? x * y
                                              : x / y;
          }
        return;
      }
      case Op::Neg: {
        const Mat& a = N[n.in[0]].value;
        n.value = Mat(a.rows, a.cols);
        for (std::size_t i = 0; i < a.data.size(); ++i) n.value.data[i] = -a.data[i];
        return;
      }
      case Op::MatMul:
        n.value = abq::matmul(N[n.in[0]].value, N[n.in[1]].value);
        return;
      case Op::Transpose:
        n.value = N[n.in[0]].value.transposed();
        return;
      case Op::Exp:
      case Op::Log:
      case Op::Sqrt:
      case Op::Sigmoid: {
        const Mat& a = N[n.in[0]].value;
        n.value = Mat(a.rows, a.cols);
        for (std::size_t i = 0; i < a.data.size(); ++i) {
          double x = a.data[i];
          n.value.data[i] = n.op == Op::Exp    ? std::exp(x)
                            : n.op == Op::Log  ? std::log(x)
                            : n.op == Op::Sqrt ? std::sqrt(x)
                                               : 1.0 / (1.0 + std::exp(-x));
        }
        return;
      }
      case Op::RoundSte: {
        const Mat& a = N[n.in[0]].value;
        n.value = Mat(a.rows, a.cols);
        if (replay) {
          for (std::size_t i = 0; i < a.data.size(); ++i)
            n.value.data[i] = a.data[i] + n.residual.data[i];
        } else {
          n.residual = Mat(a.rows, a.cols);
          for (std::size_t i = 0; i < a.data.size(); ++i) {
            double r = round_half_away(a.data[i]);
            n.residual.data[i] = r - a.data[i];
            n.value.data[i] = r;
          }
        }
        return;
      }
      case Op::ClampSte: {
        const Mat& a = N[n.in[0]].value;
        n.value = Mat(a.rows, a.cols);
        if (!replay) n.side.assign(a.data.size(), 1);
        for (std::size_t i = 0; i < a.data.size(); ++i) {
          double x = a.data[i];
          if (!replay) n.side[i] = x < n.lo ? 0 : (x > n.hi ? 2 : 1);
          n.value.data[i] = n.side[i] == 0 ? n.lo : n.side[i] == 2 ? n.hi : x;
        }
        return;
      }
      case Op::RowMax:
      case Op::RowMin: {
        const Mat& a = N[n.in[0]].value;
        n.value = Mat(a.rows, 1);
        if (!replay) {
          n.pick.assign(a.rows, 0);
          for (std::size_t i = 0; i < a.rows; ++i)
            for (std::size_t j = 1; j < a.cols; ++j) {
              bool better = n.op == Op::RowMax ? a(i, j) > a(i, n.pick[i])
                                               : a(i, j) < a(i, n.pick[i]);
              if (better) n.pick[i] = j;
            }
        }
        for (std::size_t i = 0; i < a.rows; ++i) n.value(i, 0) = a(i, n.pick[i]);
        return;
      }
      case Op::RowSum: {
        const Mat& a = N[n.in[0]].value;
        n.value = Mat(a.rows, 1, 0.0);
        for (std::size_t i = 0; i < a.rows; ++i)
          for (std::size_t j = 0; j < a.cols; ++j) n.value(i, 0) += a(i, j);
        return;
      }
      case Op::MeanAll: {
        const Mat& a = N[n.in[0]].value;
        double s = 0.0;
        for (double v : a.data) s += v;
        n.value = Mat(1, 1, s / double(a.data.size()));
        return;
      }
      case Op::SoftmaxRows: {
        const Mat& a = N[n.in[0]].value;
        n.value = Mat(a.rows, a.cols);
        for (std::size_t i = 0; i < a.rows; ++i) {
          double mx = a(i, 0);
          for (std::size_t j = 1; j < a.cols; ++j) mx = std::max(mx, a(i, j));
          double sum = 0.0;
          for (std::size_t j = 0; j < a.cols; ++j) {
            double e = std::exp(a(i, j) - mx);
            n.value(i, j) = e;
            sum += e;
          }
          for (std::size_t j = 0; j < a.cols; ++j) n.value(i, j) /= sum;
        }
        return;
      }
      case Op::SliceCols: {
        const Mat& a = N[n.in[0]].value;
        n.value = Mat(a.rows, n.width);
        for (std::size_t i = 0; i < a.rows; ++i)
          for (std::size_t j = 0; j < n.width; ++j) n.value(i, j) = a(i, n.c_lo + j);
        return;
      }
      case Op::ConcatCols: {
        std::size_t cols = 0, rows = N[n.in[0]].value.rows;
        for (int id : n.in) cols += N[id].value.cols;
        n.value = Mat(rows, cols);
        std::size_t off = 0;
        for (int id : n.in) {
          const Mat& a = N[id].value;
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < a.cols; ++j) n.value(i, off + j) = a(i, j);
          off += a.cols;
        }
        return;
      }
      case Op::MaxElem: {
        const Mat& a = N[n.in[0]].value;
        const Mat& b = N[n.in[1]].value;
        if (!a.same_shape(b)) throw ShapeError("tape: MaxElem operands differ in shape");
        n.value = Mat(a.rows, a.cols);
        if (!replay) n.side.assign(a.data.size(), 0);
        for (std::size_t i = 0; i < a.data.size(); ++i) {
          if (!replay) n.side[i] = a.data[i] >= b.data[i] ? 0 : 1;
          n.value.data[i] = n.side[i] == 0 ? a.data[i] : b.data[i];
        }
        return;
      }
    }
  }

  void prop(Node& n) {
    auto& N = nodes;
    const Mat& g = n.grad;
    switch (n.op) {
      case Op::Param:
      case Op::Const:
        return;
      case Op::Add:
      case Op::Sub: {
        Mat& ga = N[n.in[0]].grad;
        Mat& gb = N[n.in[1]].grad;
        for (std::size_t i = 0; i < g.rows; ++i)
          for (std::size_t j = 0; j < g.cols; ++j) {
            ga(i, j) += g(i, j);
            gb(gb.rows == 1 ? 0 : i, gb.cols == 1 ? 0 : j) +=
                n.op == Op::Add ? g(i, j) : -g(i, j);
          }
        return;
      }
      case Op::Mul:
      case Op::Div: {
        const Mat& a = N[n.in[0]].value;
        const Mat& b = N[n.in[1]].value;
        Mat& ga = N[n.in[0]].grad;
        Mat& gb = N[n.in[1]].grad;
        for (std::size_t i = 0; i < g.rows; ++i)
          for (std::size_t j = 0; j < g.cols; ++j) {
            double y = bval(b, i, j);
            std::size_t bi = gb.rows == 1 ? 0 : i, bj = gb.cols == 1 ? 0 : j;
            if (n.op == Op::Mul) {
              ga(i, j) += g(i, j) * y;
              gb(bi, bj) += g(i, j) * a(i, j);
            } else {
              ga(i, j) += g(i, j) / y;
              gb(bi, bj) += -g(i, j) * a(i, j) / (y * y);
            }
          }
        return;
      }
      case Op::Neg: {
        Mat& ga = N[n.in[0]].grad;
        for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] -= g.data[i];
        return;
      }
      case Op::MatMul: {
        const Mat& a = N[n.in[0]].value;
        const Mat& b = N[n.in[1]].value;
        Mat& ga = N[n.in[0]].grad;
        Mat& gb = N[n.in[1]].grad;
        for (std::size_t i = 0; i < a.rows; ++i)
          for (std::size_t k = 0; k < a.cols; ++k) {
            double s = 0.0;
            for (std::size_t j = 0; j < b.cols; ++j) s += g(i, j) * b(k, j);
            ga(i, k) += s;
          }
        for (std::size_t k = 0; k < b.rows; ++k)
          for (std::size_t j = 0; j < b.cols; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < a.rows; ++i) s += a(i, k) * g(i, j);
            gb(k, j) += s;
          }
        return;
      }
      case Op::Transpose: {
        Mat& ga = N[n.in[0]].grad;
        for (std::size_t i = 0; i < g.rows; ++i)
          for (std::size_t j = 0; j < g.cols; ++j) ga(j, i) += g(i, j);
        return;
      }
      case Op::Exp: {
        Mat& ga = N[n.in[0]].grad;
        for (std::size_t i = 0; i < g.data.size(); ++i)
          ga.data[i] += g.data[i] * n.value.data[i];
        return;
      }
      case Op::Log: {
        const Mat& a = N[n.in[0]].value;
        Mat& ga = N[n.in[0]].grad;
        for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] / a.data[i];
        return;
      }
      case Op::Sqrt: {
        Mat& ga = N[n.in[0]].grad;
        for (std::size_t i = 0; i < g.data.size(); ++i)
          ga.data[i] += g.data[i] * 0.5 / n.value.data[i];
        return;
      }
      case Op::Sigmoid: {
        Mat& ga = N[n.in[0]].grad;
        for (std::size_t i = 0; i < g.data.size(); ++i) {
          double s = n.value.data[i];
          ga.data[i] += g.data[i] * s * (1.0 - s);
        }
        return;
      }
      case Op::RoundSte: {
        Mat& ga = N[n.in[0]].grad;
        for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
        return;
      }
      case Op::ClampSte: {
        Mat& ga = N[n.in[0]].grad;
        for (std::size_t i = 0; i < g.data.size(); ++i)
          if (n.side[i] == 1) ga.data[i] += g.data[i];
        return;
      }
      case Op::RowMax:
      case Op::RowMin: {
        Mat& ga = N[n.in[0]].grad;
        for (std::size_t i = 0; i < g.rows; ++i) ga(i, n.pick[i]) += g(i, 0);
        return;
      }
      case Op::RowSum: {
        Mat& ga = N[n.in[0]].grad;
        for (std::size_t i = 0; i < ga.rows; ++i)
          for (std::size_t j = 0; j < ga.cols; ++j) ga(i, j) += g(i, 0);
        return;
      }
      case Op::MeanAll: {
        Mat& ga = N[n.in[0]].grad;
        double s = g(0, 0) / double(ga.data.size());
        for (auto& v : ga.data) v += s;
        return;
      }
      case Op::SoftmaxRows: {
        Mat& ga = N[n.in[0]].grad;
        const Mat& p = n.value;
        for (std::size_t i = 0; i < p.rows; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < p.cols; ++j) dot += g(i, j) * p(i, j);
          for (std::size_t j = 0; j < p.cols; ++j) ga(i, j) += p(i, j) * (g(i, j) - dot);
        }
        return;
      }
      case Op::SliceCols: {
        Mat& ga = N[n.in[0]].grad;
        for (std::size_t i = 0; i < g.rows; ++i)
          for (std::size_t j = 0; j < g.cols; ++j) ga(i, n.c_lo + j) += g(i, j);
        return;
      }
      case Op::ConcatCols: {
        std::size_t off = 0;
        for (int id : n.in) {
          Mat& ga = N[id].grad;
          for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < ga.cols; ++j) ga(i, j) += g(i, off + j);
          off += ga.cols;
        }
        return;
      }
      case Op::MaxElem: {
        Mat& ga = N[n.in[0]].grad;
        Mat& gb = N[n.in[1]].grad;
        for (std::size_t i = 0; i < g.data.size(); ++i)
          (n.side[i] == 0 ? ga.data[i] : gb.data[i]) += g.data[i];
        return;
      }
    }
  }
};

// ---- expression helpers -----------------------------------------------------

inline Val add(Val a, Val b) { return a.tape->push(Op::Add, {a.id, b.id}); }
inline Val sub(Val a, Val b) { return a.tape->push(Op::Sub, {a.id, b.id}); }
inline Val mul(Val a, Val b) { return a.tape->push(Op::Mul, {a.id, b.id}); }
inline Val div(Val a, Val b) { return a.tape->push(Op::Div, {a.id, b.id}); }
inline Val neg(Val a) { return a.tape->push(Op::Neg, {a.id}); }
inline Val matmul(Val a, Val b) { return a.tape->push(Op::MatMul, {a.id, b.id}); }
inline Val transpose(Val a) { return a.tape->push(Op::Transpose, {a.id}); }
inline Val exp(Val a) { return a.tape->push(Op::Exp, {a.id}); }
inline Val log(Val a) { return a.tape->push(Op::Log, {a.id}); }
inline Val sqrt(Val a) { return a.tape->push(Op::Sqrt, {a.id}); }
inline Val sigmoid(Val a) { return a.tape->push(Op::Sigmoid, {a.id}); }
inline Val round_ste(Val a) { return a.tape->push(Op::RoundSte, {a.id}); }
inline Val row_max(Val a) { return a.tape->push(Op::RowMax, {a.id}); }
inline Val row_min(Val a) { return a.tape->push(Op::RowMin, {a.id}); }
inline Val row_sum(Val a) { return a.tape->push(Op::RowSum, {a.id}); }
inline Val mean_all(Val a) { return a.tape->push(Op::MeanAll, {a.id}); }
inline Val softmax_rows(Val a) { return a.tape->push(Op::SoftmaxRows, {a.id}); }
inline Val max_elem(Val a, Val b) { return a.tape->push(Op::MaxElem, {a.id, b.id}); }
inline Val clamp_ste(Val a, double lo, double hi) {
  return a.tape->push(Op::ClampSte, {a.id}, lo, hi);
}
inline Val slice_cols(Val a, std::size_t lo, std::size_t width) {
  return a.tape->push(Op::SliceCols, {a.id}, 0.0, 0.0, lo, width);
}
inline Val concat_cols(const std::vector<Val>& parts) {
  std::vector<int> ids;
  ids.reserve(parts.size());
  for (auto v : parts) ids.push_back(v.id);
  return parts[0].tape->push(Op::ConcatCols, std::move(ids));
}

}  // namespace abq::ad
