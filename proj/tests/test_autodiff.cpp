#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "abq/autodiff.hpp"

using namespace abq;
using ad::Tape;
using ad::Val;

namespace {

// Central finite differences on the frozen replay of the tape: discrete
// decisions recorded at build time stay fixed, so the surrogate is smooth.
void check_grads(std::function<Val(Tape&, Val)> build, const Mat& x0, double h = 1e-6,
                 double tol = 1e-5) {
  Tape t;
  Val x = t.param(x0);
  Val loss = build(t, x);
  REQUIRE(t.value(loss).rows == 1);
  REQUIRE(t.value(loss).cols == 1);
  t.backward(loss);
  Mat grad = t.grad(x);

  for (std::size_t i = 0; i < x0.data.size(); ++i) {
    double saved = t.value(x).data[i];
    t.value(x).data[i] = saved + h;
    t.replay();
    double up = t.value(loss)(0, 0);
    t.value(x).data[i] = saved - h;
    t.replay();
    double dn = t.value(loss)(0, 0);
    t.value(x).data[i] = saved;
    t.replay();
    double fd = (up - dn) / (2 * h);
    REQUIRE_THAT(grad.data[i], Catch::Matchers::WithinAbs(fd, tol + tol * std::abs(fd)));
  }
}

}  // namespace

TEST_CASE("elementwise op gradients match finite differences", "[autodiff]") {
  Rng rng(51);
  Mat x = rng.gauss_matrix(3, 4);
  for (auto& v : x.data) v = std::abs(v) + 0.5;  // keep log/sqrt in domain

  check_grads([](Tape&, Val v) { return ad::mean_all(ad::exp(v)); }, x);
  check_grads([](Tape&, Val v) { return ad::mean_all(ad::log(v)); }, x);
  check_grads([](Tape&, Val v) { return ad::mean_all(ad::sqrt(v)); }, x);
  check_grads([](Tape&, Val v) { return ad::mean_all(ad::sigmoid(v)); }, x);
  check_grads([](Tape&, Val v) { return ad::mean_all(ad::neg(ad::mul(v, v))); }, x);
  check_grads(
      [](Tape& t, Val v) { return ad::mean_all(ad::div(t.constant(Mat(3, 4, 1.0)), v)); }, x);
}

TEST_CASE("matmul and transpose gradients", "[autodiff]") {
  Rng rng(52);
  Mat x = rng.gauss_matrix(3, 4);
  Mat w = rng.gauss_matrix(4, 2);
  check_grads(
      [&](Tape& t, Val v) { return ad::mean_all(ad::matmul(v, t.constant(w))); }, x);
  check_grads(
      [&](Tape& t, Val v) {
        return ad::mean_all(ad::matmul(t.constant(w.transposed()), ad::transpose(v)));
      },
      x);
}

TEST_CASE("broadcast gradients sum over the broadcast dimension", "[autodiff]") {
  Rng rng(53);
  Mat x = rng.gauss_matrix(1, 4);  // broadcast over rows
  Mat a = rng.gauss_matrix(3, 4);
  check_grads([&](Tape& t, Val v) { return ad::mean_all(ad::mul(t.constant(a), v)); }, x);
  Mat col = rng.gauss_matrix(3, 1);  // broadcast over cols
  check_grads([&](Tape& t, Val v) { return ad::mean_all(ad::add(t.constant(a), v)); }, col);
}

TEST_CASE("softmax rows gradient", "[autodiff]") {
  Rng rng(54);
  Mat x = rng.gauss_matrix(3, 5);
  Mat w = rng.gauss_matrix(3, 5);
  check_grads(
      [&](Tape& t, Val v) {
        return ad::mean_all(ad::mul(ad::softmax_rows(v), t.constant(w)));
      },
      x);
}

TEST_CASE("row reductions and slicing", "[autodiff]") {
  Rng rng(55);
  Mat x = rng.gauss_matrix(4, 6);
  check_grads([](Tape&, Val v) { return ad::mean_all(ad::row_max(v)); }, x);
  check_grads([](Tape&, Val v) { return ad::mean_all(ad::row_min(v)); }, x);
  check_grads([](Tape&, Val v) { return ad::mean_all(ad::row_sum(v)); }, x);
  check_grads([](Tape&, Val v) { return ad::mean_all(ad::slice_cols(v, 2, 3)); }, x);
  check_grads(
      [](Tape&, Val v) {
        return ad::mean_all(ad::concat_cols({ad::slice_cols(v, 0, 2), ad::slice_cols(v, 3, 2)}));
      },
      x);
  check_grads(
      [](Tape&, Val v) {
        return ad::mean_all(ad::max_elem(ad::row_max(v), ad::neg(ad::row_min(v))));
      },
      x);
}

TEST_CASE("straight-through round passes the gradient through", "[autodiff]") {
  Rng rng(56);
  Mat x = rng.gauss_matrix(2, 3, 2.0);
  Tape t;
  Val v = t.param(x);
  Val loss = ad::mean_all(ad::round_ste(v));
  // forward value is rounded
  Mat fwd = t.value(ad::round_ste(t.param(x)));
  for (std::size_t i = 0; i < x.data.size(); ++i)
    REQUIRE(fwd.data[i] == std::round(x.data[i]));
  t.backward(loss);
  for (double g : t.grad(v).data) REQUIRE(g == Catch::Approx(1.0 / 6.0));
}

TEST_CASE("straight-through clamp gates the gradient by recorded side", "[autodiff]") {
  Mat x(1, 3);
  x(0, 0) = -2.0;
  x(0, 1) = 0.3;
  x(0, 2) = 5.0;
  Tape t;
  Val v = t.param(x);
  Val loss = ad::mean_all(ad::clamp_ste(v, 0.0, 1.0));
  REQUIRE(t.value(loss)(0, 0) == Catch::Approx((0.0 + 0.3 + 1.0) / 3.0));
  t.backward(loss);
  REQUIRE(t.grad(v)(0, 0) == 0.0);
  REQUIRE(t.grad(v)(0, 1) == Catch::Approx(1.0 / 3.0));
  REQUIRE(t.grad(v)(0, 2) == 0.0);
}

TEST_CASE("replay keeps rounding decisions frozen", "[autodiff]") {
  Mat x(1, 1, 0.4);
  Tape t;
  Val v = t.param(x);
  Val y = ad::round_ste(v);
  REQUIRE(t.value(y)(0, 0) == 0.0);
  // nudge past the rounding boundary; the frozen residual keeps the surrogate
  t.value(v)(0, 0) = 0.6;
  t.replay();
  REQUIRE(t.value(y)(0, 0) == Catch::Approx(0.6 + (0.0 - 0.4)));
}
