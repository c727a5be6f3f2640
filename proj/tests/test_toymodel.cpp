#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "abq/toyblock.hpp"

using namespace abq;

TEST_CASE("seeded block construction is deterministic", "[toymodel]") {
  ToyBlock a = ToyBlock::seeded(42);
  ToyBlock b = ToyBlock::seeded(42);
  ToyBlock c = ToyBlock::seeded(43);
  REQUIRE(a.wq == b.wq);
  REQUIRE(a.wdown == b.wdown);
  REQUIRE_FALSE(a.wq == c.wq);
  REQUIRE(a.hidden == 86);
  REQUIRE_THROWS_AS(ToyBlock::seeded(1, 30, 4), ValueError);
}

TEST_CASE("rmsnorm rows have unit mean square under unit gains", "[toymodel]") {
  Rng rng(61);
  Mat x = rng.gauss_matrix(5, 32, 3.0);
  Mat n = detail::rmsnorm(x, std::vector<double>(32, 1.0));
  for (std::size_t i = 0; i < n.rows; ++i) {
    double msq = 0.0;
    for (std::size_t j = 0; j < n.cols; ++j) msq += n(i, j) * n(i, j);
    REQUIRE(msq / 32.0 == Catch::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("attention maps are row stochastic", "[toymodel]") {
  ToyBlock block = ToyBlock::seeded(7);
  Rng rng(62);
  Mat x = rng.gauss_matrix(10, 32);
  auto [out, trace] = forward_fp(block, x);
  REQUIRE(trace.attention.size() == block.heads);
  for (const Mat& p : trace.attention) {
    REQUIRE(p.rows == 10);
    REQUIRE(p.cols == 10);
    for (std::size_t i = 0; i < p.rows; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < p.cols; ++j) {
        REQUIRE(p(i, j) >= 0.0);
        sum += p(i, j);
      }
      REQUIRE(sum == Catch::Approx(1.0));
    }
  }
  double share = first_token_attention_share(trace);
  REQUIRE(share > 0.0);
  REQUIRE(share < 1.0);
}

TEST_CASE("passthrough bits reproduce the fp forward exactly", "[toymodel]") {
  ToyBlock block = ToyBlock::seeded(8);
  Rng rng(63);
  Mat x = rng.gauss_matrix(6, 32);
  BlockSpecs specs = BlockSpecs::make(16, 16);
  REQUIRE(specs.passthrough());
  auto [want, tfp] = forward_fp(block, x);
  auto [got, tq] = forward_quant(block, x, specs, block.init_params());
  REQUIRE(got == want);
}

TEST_CASE("quantized forward tracks fp at high bits", "[toymodel]") {
  ToyBlock block = ToyBlock::seeded(9);
  Rng rng(64);
  Mat x = rng.gauss_matrix(8, 32);
  auto [want, tfp] = forward_fp(block, x);

  auto err = [&](unsigned bits) {
    BlockSpecs specs = BlockSpecs::make(bits, bits);
    auto [got, t] = forward_quant(block, x, specs, block.init_params());
    return rel_diff(got, want);
  };
  double e8 = err(8), e4 = err(4), e2 = err(2);
  REQUIRE(e8 < 0.02);
  REQUIRE(e8 < e4);
  REQUIRE(e4 < e2);
}

TEST_CASE("quantized forward traces one engine event per projection", "[toymodel]") {
  ToyBlock block = ToyBlock::seeded(10);
  Rng rng(65);
  Mat x = rng.gauss_matrix(4, 32);
  BlockSpecs specs = BlockSpecs::make(4, 4);
  auto [out, trace] = forward_quant(block, x, specs, block.init_params());
  REQUIRE(trace.events.size() == 7);
  std::vector<std::string> want = {"q_proj", "k_proj",  "v_proj", "o_proj",
                                   "gate_proj", "up_proj", "down_proj"};
  for (std::size_t i = 0; i < 7; ++i) {
    REQUIRE(trace.events[i].layer == want[i]);
    REQUIRE(trace.events[i].requant);
    REQUIRE(trace.events[i].bitpack);
    REQUIRE(trace.events[i].dequant);
  }
}

TEST_CASE("balance vectors cancel out of the quantized forward", "[toymodel]") {
  // Scaling weights by s and activations by 1/s is product preserving; with
  // quantization in between the result only shifts slightly.
  ToyBlock block = ToyBlock::seeded(11);
  Rng rng(66);
  Mat x = rng.gauss_matrix(6, 32);
  BlockSpecs specs = BlockSpecs::make(8, 8);
  BlockQuantParams base = block.init_params();
  BlockQuantParams scaled = base;
  for (Layer l : kLayers)
    for (auto& s : scaled.at(l).s) s = rng.uniform(0.5, 2.0);
  auto [y0, t0] = forward_quant(block, x, specs, base);
  auto [y1, t1] = forward_quant(block, x, specs, scaled);
  REQUIRE(rel_diff(y1, y0) < 0.05);
}

TEST_CASE("initial compensation is exactly zero", "[toymodel]") {
  ToyBlock block = ToyBlock::seeded(12);
  BlockQuantParams p = block.init_params();
  REQUIRE(p.comp_a == std::vector<double>(block.dim, 1.0));
  REQUIRE(p.comp_b == std::vector<double>(block.hidden, 0.0));
  // gamma on with a*b^T == 0 must not change the forward
  Rng rng(67);
  Mat x = rng.gauss_matrix(5, 32);
  BlockSpecs specs = BlockSpecs::make(4, 4);
  BlockQuantParams gp = p;
  gp.gamma = 1;
  auto [y0, t0] = forward_quant(block, x, specs, p);
  auto [y1, t1] = forward_quant(block, x, specs, gp);
  REQUIRE(y0 == y1);
}

TEST_CASE("shape errors name the contract", "[toymodel]") {
  ToyBlock block = ToyBlock::seeded(13);
  Mat bad(3, 31);
  REQUIRE_THROWS_AS(forward_fp(block, bad), ShapeError);
  REQUIRE_THROWS_AS(forward_quant(block, bad, BlockSpecs::make(4, 4), block.init_params()),
                    ShapeError);
}
