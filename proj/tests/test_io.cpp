#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "abq/io.hpp"

using namespace abq;

TEST_CASE("quantized tensor round trip", "[io]") {
  Rng rng(91);
  Mat x = rng.gauss_matrix(7, 13);
  QuantSpec spec;
  spec.bits = 5;
  spec.granularity = Granularity::PerToken;
  QuantizedTensor q = quantize(x, spec);

  std::stringstream ss;
  io::write_quantized(ss, q);
  QuantizedTensor back = io::read_quantized(ss);
  REQUIRE(back.codes == q.codes);
  REQUIRE(back.zero_points == q.zero_points);
  REQUIRE(back.spec.bits == q.spec.bits);
  REQUIRE(back.spec.scheme == q.spec.scheme);
  REQUIRE(back.spec.granularity == q.spec.granularity);
  REQUIRE(back.scales.size() == q.scales.size());
  for (std::size_t i = 0; i < q.scales.size(); ++i)
    REQUIRE(back.scales[i] == Catch::Approx(q.scales[i]).epsilon(1e-6));  // f32 storage
}

TEST_CASE("bit plane round trip is bit identical", "[io]") {
  Rng rng(92);
  BitPlaneMatrix m = bitpack(rng.code_matrix(9, 130, 6), 6);
  std::stringstream ss;
  io::write_planes(ss, m);
  REQUIRE(io::read_planes(ss) == m);
}

TEST_CASE("bad magic and truncation are IoErrors", "[io]") {
  std::stringstream ss("ABQXgarbage");
  REQUIRE_THROWS_AS(io::read_planes(ss), IoError);
  std::stringstream truncated;
  truncated.write("ABQP\x01\x00", 6);
  REQUIRE_THROWS_AS(io::read_planes(truncated), IoError);
}

TEST_CASE("block weights round trip at f32 precision", "[io]") {
  ToyBlock b = ToyBlock::seeded(93);
  std::stringstream ss;
  io::write_block(ss, b);
  ToyBlock back = io::read_block(ss);
  REQUIRE(back.dim == b.dim);
  REQUIRE(back.heads == b.heads);
  REQUIRE(back.hidden == b.hidden);
  REQUIRE(max_abs_diff(back.wq, b.wq) < 1e-6);
  REQUIRE(max_abs_diff(back.wdown, b.wdown) < 1e-6);
  REQUIRE(back.norm1_gain.size() == b.dim);
}

TEST_CASE("calibration state round trip preserves doubles exactly", "[io]") {
  ToyBlock b = ToyBlock::seeded(94);
  CalibState st;
  st.params = b.init_params();
  st.params.gamma = 1;
  st.step = 17;
  st.params.at(Layer::Q).alpha = 0.8125;
  st.params.at(Layer::Down).s[5] = 1.3330078125;
  st.history.push_back({0, 1.5, 1.0, 0.5});

  std::stringstream ss;
  io::write_calib(ss, st);
  CalibState back = io::read_calib(ss);
  REQUIRE(back.step == 17);
  REQUIRE(back.params.gamma == 1);
  REQUIRE(back.params.at(Layer::Q).alpha == 0.8125);
  REQUIRE(back.params.at(Layer::Down).s == st.params.at(Layer::Down).s);
  REQUIRE(back.params.comp_a == st.params.comp_a);
  REQUIRE(back.params.comp_b == st.params.comp_b);
}

TEST_CASE("loss history CSV format", "[io]") {
  std::vector<LossSample> h = {{0, 2.5, 2.0, 0.5}, {1, 2.25, 1.75, 0.5}};
  std::stringstream ss;
  io::write_loss_csv(ss, h);
  std::string line;
  std::getline(ss, line);
  REQUIRE(line == "step,loss,dlc,akl");
  std::getline(ss, line);
  REQUIRE(line == "0,2.5,2,0.5");
}

TEST_CASE("bench record CSV round trip", "[io]") {
  std::vector<BenchRecord> recs(2);
  recs[0].config_id = "BM64_BN64_BK512_WM32_WN32";
  recs[0].BM = 64;
  recs[0].BN = 64;
  recs[0].BK = 512;
  recs[0].WM = 32;
  recs[0].WN = 32;
  recs[0].p = 2;
  recs[0].q = 3;
  recs[0].M = 8;
  recs[0].N = 4096;
  recs[0].K = 4096;
  recs[0].median_us = 123.5;
  recs[0].tops = 0.25;
  recs[1] = recs[0];
  recs[1].config_id = "naive";

  std::stringstream ss;
  io::write_bench_csv(ss, recs);
  auto back = io::read_bench_csv(ss);
  REQUIRE(back.size() == 2);
  REQUIRE(back[0].config_id == recs[0].config_id);
  REQUIRE(back[0].BM == 64);
  REQUIRE(back[0].median_us == 123.5);
  REQUIRE(back[0].tops == 0.25);
  REQUIRE(back[1].config_id == "naive");
}

TEST_CASE("key=value config parsing", "[io]") {
  std::stringstream ss(
      "# comment\n"
      "epochs = 3\n"
      "lr_s=0.01\n"
      "scheme = balanced  # trailing comment\n"
      "gamma_blocks = 0,31\n"
      "\n");
  CalibOptions o = io::parse_calib_options(ss);
  REQUIRE(o.epochs == 3);
  REQUIRE(o.lr_s == 0.01);
  REQUIRE(o.lr_clip == 1e-2);  // default untouched
  REQUIRE(o.weight_scheme == Scheme::Balanced);
  REQUIRE(o.gamma_blocks == std::vector<int>{0, 31});

  std::stringstream bad("epochs 3\n");
  REQUIRE_THROWS_AS(io::parse_calib_options(bad), IoError);
  std::stringstream badscheme("scheme = wild\n");
  REQUIRE_THROWS_AS(io::parse_calib_options(badscheme), IoError);
}
