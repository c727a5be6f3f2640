// abqtool: verify / bench / calibrate / quantize / pack / inspect front-end
// for the abq library.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "abq/abq.hpp"

namespace {

using nlohmann::json;

struct Shape {
  std::size_t m = 0, n = 0, k = 0;
};

Shape parse_shape(const std::string& s) {
  Shape sh;
  char x1, x2;
  std::istringstream is(s);
  if (!(is >> sh.m >> x1 >> sh.n >> x2 >> sh.k) || x1 != 'x' || x2 != 'x' || !is.eof() ||
      sh.m == 0 || sh.n == 0 || sh.k == 0)
    throw CLI::ValidationError("--shape", "expected MxNxK, got " + s);
  return sh;
}

struct Bits {
  unsigned w = 4, a = 4;
};

Bits parse_bits(const std::string& s) {
  Bits b;
  char cw, ca;
  std::istringstream is(s);
  if (!(is >> cw >> b.w >> ca >> b.a) || cw != 'w' || ca != 'a' || !is.eof() || b.w == 0 ||
      b.a == 0)
    throw CLI::ValidationError("--bits", "expected wXaY (e.g. w2a8), got " + s);
  return b;
}

std::vector<Shape> preset_shapes(const std::string& name) {
  if (name == "llama7b-gemv") {
    // (K, N) projection shapes at decode time, one token per step.
    return {{1, 4096, 4096}, {1, 8192, 1024}, {1, 4096, 11008},
            {1, 5120, 5120}, {1, 11008, 4096}};
  }
  throw CLI::ValidationError("--preset", "unknown preset " + name);
}

json record_json(const abq::BenchRecord& r) {
  return json{{"config_id", r.config_id}, {"BM", r.BM},   {"BN", r.BN},
              {"BK", r.BK},               {"WM", r.WM},   {"WN", r.WN},
              {"p", r.p},                 {"q", r.q},     {"M", r.M},
              {"N", r.N},                 {"K", r.K},     {"median_us", r.median_us},
              {"tops", r.tops}};
}

void emit_records(const std::vector<abq::BenchRecord>& records, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw abq::IoError("cannot open for writing: " + path);
  if (path.size() > 5 && path.substr(path.size() - 5) == ".json") {
    json arr = json::array();
    for (const auto& r : records) arr.push_back(record_json(r));
    os << arr.dump(2) << "\n";
  } else {
    abq::io::write_bench_csv(os, records);
  }
}

// ---- verify ----------------------------------------------------------------

int cmd_verify(unsigned cases, std::uint64_t seed) {
  abq::Rng rng(seed);
  std::map<std::pair<unsigned, unsigned>, unsigned> passes;
  for (unsigned c = 0; c < cases; ++c) {
    std::size_t m = rng.integer(1, 64), n = rng.integer(1, 64), k = rng.integer(1, 64);
    unsigned p = unsigned(rng.integer(1, 8)), q = unsigned(rng.integer(1, 8));
    abq::CodeMat a = rng.code_matrix(m, k, p);
    abq::CodeMat b = rng.code_matrix(n, k, q);

    abq::IntMat want(m, n, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        std::int64_t acc = 0;
        for (std::size_t kk = 0; kk < k; ++kk)
          acc += std::int64_t(a(i, kk)) * std::int64_t(b(j, kk));
        want(i, j) = acc;
      }

    auto got = abq::gemm_arbitrary(abq::bitpack(a, p), abq::bitpack(b, q),
                                   abq::default_tile(p, q));
    bool ok = true;
    for (std::size_t i = 0; ok && i < m; ++i)
      for (std::size_t j = 0; ok && j < n; ++j)
        if (std::int64_t(got(i, j)) != want(i, j)) ok = false;
    if (!ok) {
      std::cerr << "verify: MISMATCH at case " << c << ": M=" << m << " N=" << n
                << " K=" << k << " p=" << p << " q=" << q << " seed=" << seed << "\n";
      return 1;
    }
    ++passes[{p, q}];
  }
  std::cout << "verify: " << cases << " cases, all pass\n";
  for (const auto& [pq, count] : passes)
    std::cout << "  p=" << pq.first << " q=" << pq.second << ": " << count << " pass\n";
  return 0;
}

// ---- bench -----------------------------------------------------------------

int cmd_bench(const std::vector<Shape>& shapes, Bits bits, unsigned trials,
              const std::string& emit, std::uint64_t seed) {
  std::vector<abq::BenchRecord> all;
  for (const Shape& sh : shapes) {
    abq::Rng rng(seed);
    abq::CodeMat act = rng.code_matrix(sh.m, sh.k, bits.a);
    abq::CodeMat wt = rng.code_matrix(sh.n, sh.k, bits.w);
    abq::BitPlaneMatrix a = abq::bitpack(act, bits.a);
    abq::BitPlaneMatrix bt = abq::bitpack(wt, bits.w);

    auto candidates = abq::enumerate_tile_candidates(bits.a, bits.w, sh.m, sh.n, sh.k);
    auto result = abq::autotune(candidates, a, bt, trials);

    abq::BenchRecord naive;
    naive.config_id = "naive";
    naive.p = bits.a;
    naive.q = bits.w;
    naive.M = sh.m;
    naive.N = sh.n;
    naive.K = sh.k;
    naive.median_us = abq::detail::time_median_us([&] { abq::gemm_naive(a, bt); }, trials);
    naive.tops = abq::detail::tops_of(sh.m, sh.n, sh.k, naive.median_us);
    result.records.push_back(naive);

    std::cout << sh.m << "x" << sh.n << "x" << sh.k << " w" << bits.w << "a" << bits.a
              << ": best " << result.best.describe() << "\n";
    for (const auto& r : result.records)
      std::cout << "  " << r.config_id << ": " << r.median_us << " us, " << r.tops
                << " TOPS\n";
    all.insert(all.end(), result.records.begin(), result.records.end());
  }
  if (!emit.empty()) emit_records(all, emit);
  return 0;
}

// ---- calibrate -------------------------------------------------------------

abq::ToyBlock block_from(const std::string& path, std::uint64_t seed, std::size_t dim,
                         std::size_t heads) {
  if (!path.empty() && std::filesystem::exists(path)) return abq::io::load_block(path);
  abq::ToyBlock b = abq::ToyBlock::seeded(seed, dim, heads);
  if (!path.empty()) abq::io::save_block(path, b);
  return b;
}

std::vector<abq::Mat> calib_segments(const abq::CalibOptions& opts) {
  abq::Rng rng(opts.seed + 1);
  std::vector<abq::Mat> data;
  for (unsigned i = 0; i < opts.segments; ++i)
    data.push_back(rng.gauss_matrix(opts.tokens, opts.dim));
  return data;
}

int cmd_calibrate(const std::string& config_path, const std::string& block_path,
                  const std::string& out_path, const std::string& loss_csv,
                  std::uint64_t seed_flag, bool seed_set) {
  abq::CalibOptions opts;
  if (!config_path.empty()) {
    auto is = abq::io::detail::open_in(config_path);
    opts = abq::io::parse_calib_options(is);
  }
  if (seed_set) opts.seed = seed_flag;

  abq::ToyBlock block = block_from(block_path, opts.seed, opts.dim, opts.heads);
  abq::BlockSpecs specs = abq::BlockSpecs::make(opts.bits_w, opts.bits_a, opts.weight_scheme);
  auto data = calib_segments(opts);

  abq::CalibState state;
  try {
    state = abq::calibrate_block(block, data, specs, opts);
  } catch (const abq::ValueError& e) {
    std::cerr << "calibrate: " << e.what() << "\n";
    return 1;
  }

  if (state.history.empty()) {
    std::cout << "calibrate: passthrough bits, loss 0, nothing to do\n";
  } else {
    std::cout << "calibrate: initial loss " << state.history.front().total << ", final loss "
              << state.history.back().total << " after " << state.step << " steps\n";
  }
  if (!out_path.empty()) abq::io::save_calib(out_path, state);
  if (!loss_csv.empty()) {
    std::ofstream os(loss_csv);
    if (!os) throw abq::IoError("cannot open for writing: " + loss_csv);
    abq::io::write_loss_csv(os, state.history);
  }
  return 0;
}

// ---- quantize / pack / inspect ---------------------------------------------

// Quantized model bundle ("ABQZ"): count u32, then per layer a name record
// followed by an ABQT blob and the offline-packed ABQP blob.
void write_bundle(std::ostream& os, const abq::ToyBlock& block, const abq::BlockSpecs& specs,
                  const abq::BlockQuantParams& params) {
  os.write("ABQZ", 4);
  abq::io::detail::put<std::uint16_t>(os, abq::io::kFormatVersion);
  abq::io::detail::put<std::uint32_t>(os, 7);
  for (abq::Layer l : abq::kLayers) {
    const abq::LayerParams& lp = params.at(l);
    abq::Mat w = block.weight(l);
    for (std::size_t i = 0; i < w.rows; ++i)
      for (std::size_t j = 0; j < w.cols; ++j) w(i, j) *= lp.s[j];
    abq::QuantSpec ws = specs.weight;
    ws.alpha = lp.alpha;
    ws.beta = lp.beta;
    std::optional<abq::CompensationPair> comp;
    if (l == abq::Layer::Down && params.gamma)
      comp = abq::CompensationPair{params.comp_a, params.comp_b};
    abq::QuantizedTensor q = abq::quantize(w, ws, comp);

    std::string name = abq::layer_name(l);
    abq::io::detail::put<std::uint16_t>(os, std::uint16_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    abq::io::write_quantized(os, q);
    abq::io::write_planes(os, abq::bitpack(q.codes, q.spec.planes()));
  }
}

int cmd_quantize(const std::string& block_path, Bits bits, const std::string& calib_path,
                 const std::string& out_path, std::uint64_t seed) {
  if (bits.w > 8) {
    std::cerr << "quantize: engine supports at most 8 weight bits, got " << bits.w << "\n";
    return 1;
  }
  abq::ToyBlock block = block_from(block_path, seed, 32, 4);
  abq::BlockSpecs specs = abq::BlockSpecs::make(bits.w, bits.a);
  abq::BlockQuantParams params = block.init_params();
  if (!calib_path.empty()) {
    abq::CalibState st = abq::io::load_calib(calib_path);
    params = st.params;
  }
  auto os = abq::io::detail::open_out(out_path);
  write_bundle(os, block, specs, params);
  std::cout << "quantize: wrote " << out_path << " (7 layers, w" << bits.w << ")\n";
  return 0;
}

int cmd_pack(const std::string& in_path, const std::string& out_path) {
  auto is = abq::io::detail::open_in(in_path);
  abq::QuantizedTensor q = abq::io::read_quantized(is);
  auto os = abq::io::detail::open_out(out_path);
  abq::io::write_planes(os, abq::bitpack(q.codes, q.spec.planes()));
  std::cout << "pack: " << q.rows() << "x" << q.cols() << " codes -> " << q.spec.planes()
            << " planes\n";
  return 0;
}

int inspect_bundle(std::istream& is) {
  is.seekg(4);
  auto version = abq::io::detail::get<std::uint16_t>(is);
  auto count = abq::io::detail::get<std::uint32_t>(is);
  std::cout << "ABQZ bundle v" << version << ", " << count << " layers\n";
  bool ok = true;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto len = abq::io::detail::get<std::uint16_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    abq::QuantizedTensor q = abq::io::read_quantized(is);
    abq::BitPlaneMatrix planes = abq::io::read_planes(is);
    bool repack_ok = planes == abq::bitpack(q.codes, q.spec.planes());
    ok = ok && repack_ok;
    std::cout << "  " << name << ": " << q.rows() << "x" << q.cols() << " "
              << abq::to_string(q.spec.scheme) << " " << q.spec.bits << "-bit, codes ok, "
              << "packed planes " << (repack_ok ? "match" : "MISMATCH") << "\n";
  }
  return ok ? 0 : 1;
}

int cmd_inspect(const std::string& path) {
  auto is = abq::io::detail::open_in(path);
  char magic[4];
  is.read(magic, 4);
  if (!is) throw abq::IoError("inspect: file too short: " + path);
  std::string m(magic, 4);
  is.seekg(0);
  if (m == "ABQT") {
    abq::QuantizedTensor q = abq::io::read_quantized(is);
    std::cout << "ABQT " << q.rows() << "x" << q.cols() << " " << abq::to_string(q.spec.scheme)
              << " " << q.spec.bits << "-bit " << abq::to_string(q.spec.granularity) << ", "
              << q.axis_count() << " axis groups, codes in range\n";
    return 0;
  }
  if (m == "ABQP") {
    abq::BitPlaneMatrix p = abq::io::read_planes(is);
    std::cout << "ABQP " << p.planes << " planes, " << p.rows << "x" << p.cols << ", "
              << p.words_per_row << " words/row\n";
    return 0;
  }
  if (m == "ABQC") {
    abq::CalibState st = abq::io::read_calib(is);
    std::cout << "ABQC step " << st.step << ", gamma " << st.params.gamma << "\n";
    for (abq::Layer l : abq::kLayers) {
      const auto& lp = st.params.at(l);
      std::cout << "  " << abq::layer_name(l) << ": |s|=" << lp.s.size()
                << " alpha=" << lp.alpha << " beta=" << lp.beta << "\n";
    }
    return 0;
  }
  if (m == "ABQM") {
    abq::ToyBlock b = abq::io::read_block(is);
    std::cout << "ABQM dim=" << b.dim << " heads=" << b.heads << " hidden=" << b.hidden
              << "\n";
    return 0;
  }
  if (m == "ABQZ") return inspect_bundle(is);
  throw abq::IoError("inspect: unrecognized magic in " + path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"arbitrary-bit quantized GEMM toolkit"};
  app.require_subcommand(1);

  std::uint64_t seed = 42;
  unsigned threads = 0;
  app.add_option("--seed", seed, "global RNG seed")->capture_default_str();
  app.add_option("--threads", threads, "engine worker cap (0 = machine parallelism)");

  auto* verify = app.add_subcommand("verify", "oracle-equivalence suite");
  unsigned cases = 1000;
  verify->add_option("--cases", cases, "random cases")->check(CLI::PositiveNumber)
      ->capture_default_str();

  auto* bench = app.add_subcommand("bench", "autotune benchmark");
  std::string shape_str, preset, bits_str = "w4a4", emit;
  unsigned trials = 5;
  bench->add_option("--shape", shape_str, "problem shape MxNxK");
  bench->add_option("--preset", preset, "shape preset (llama7b-gemv)");
  bench->add_option("--bits", bits_str, "bit widths wXaY")->capture_default_str();
  bench->add_option("--trials", trials, "timing trials")->check(CLI::Range(3u, 1000u));
  bench->add_option("--emit", emit, "write records to .csv or .json");

  auto* calibrate = app.add_subcommand("calibrate", "learn scale/clip parameters");
  std::string config, block_path, calib_out = "calib.abqc", loss_csv;
  calibrate->add_option("--config", config, "key=value options file");
  calibrate->add_option("--block", block_path, "block weights file (created if absent)");
  calibrate->add_option("--out", calib_out, "CalibState output")->capture_default_str();
  calibrate->add_option("--loss-csv", loss_csv, "loss history CSV output");

  auto* quantize = app.add_subcommand("quantize", "quantize block weights offline");
  std::string q_block, q_calib, q_out = "model.abqz", q_bits = "w4a4";
  quantize->add_option("--block", q_block, "block weights file (created if absent)");
  quantize->add_option("--bits", q_bits, "bit widths wXaY")->capture_default_str();
  quantize->add_option("--calib", q_calib, "CalibState to apply");
  quantize->add_option("--out", q_out, "bundle output")->capture_default_str();

  auto* pack = app.add_subcommand("pack", "bit-pack a quantized tensor");
  std::string p_in, p_out = "planes.abqp";
  pack->add_option("--in", p_in, "ABQT input")->required();
  pack->add_option("--out", p_out, "ABQP output")->capture_default_str();

  auto* inspect = app.add_subcommand("inspect", "describe a serialized file");
  std::string i_path;
  inspect->add_option("path", i_path, "file to inspect")->required();

  CLI11_PARSE(app, argc, argv);
  abq::engine_threads() = threads;

  try {
    if (*verify) return cmd_verify(cases, seed);
    if (*bench) {
      if (shape_str.empty() == preset.empty())
        throw CLI::ValidationError("bench", "give exactly one of --shape or --preset");
      auto shapes = preset.empty() ? std::vector<Shape>{parse_shape(shape_str)}
                                   : preset_shapes(preset);
      return cmd_bench(shapes, parse_bits(bits_str), trials, emit, seed);
    }
    if (*calibrate)
      return cmd_calibrate(config, block_path, calib_out, loss_csv, seed,
                           app.count("--seed") > 0);
    if (*quantize) return cmd_quantize(q_block, parse_bits(q_bits), q_calib, q_out, seed);
    if (*pack) return cmd_pack(p_in, p_out);
    if (*inspect) return cmd_inspect(i_path);
  } catch (const CLI::ValidationError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const abq::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
