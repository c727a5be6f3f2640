#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "abq/bitplane.hpp"
#include "abq/calibration.hpp"
#include "abq/core.hpp"
#include "abq/quantizer.hpp"
#include "abq/toyblock.hpp"
#include "abq/tune.hpp"

namespace abq::io {

inline constexpr std::uint16_t kFormatVersion = 1;

namespace detail {

// All formats are little-endian; this code assumes a little-endian host.

template <typename T>
inline void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
inline T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("unexpected end of file");
  return v;
}

inline void put_magic(std::ostream& os, const char* magic) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char* magic) {
  char buf[4];
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0)
    throw IoError(std::string("bad magic, expected ") + magic);
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  return is;
}

}  // namespace detail

// ---- QuantizedTensor ("ABQT") ----------------------------------------------

inline void write_quantized(std::ostream& os, const QuantizedTensor& q) {
  detail::put_magic(os, "ABQT");
  detail::put<std::uint16_t>(os, kFormatVersion);
  detail::put<std::uint8_t>(os, std::uint8_t(q.spec.bits));
  detail::put<std::uint8_t>(os, std::uint8_t(q.spec.scheme));
  detail::put<std::uint8_t>(os, std::uint8_t(q.spec.granularity));
  detail::put<std::uint32_t>(os, std::uint32_t(q.rows()));
  detail::put<std::uint32_t>(os, std::uint32_t(q.cols()));
  for (double s : q.scales) detail::put<float>(os, float(s));
  for (std::int32_t z : q.zero_points) detail::put<std::int32_t>(os, z);
  os.write(reinterpret_cast<const char*>(q.codes.data.data()),
           std::streamsize(q.codes.data.size()));
}

inline QuantizedTensor read_quantized(std::istream& is) {
  detail::expect_magic(is, "ABQT");
  auto version = detail::get<std::uint16_t>(is);
  if (version != kFormatVersion) throw IoError("ABQT: unsupported version");
  QuantizedTensor q;
  q.spec.bits = detail::get<std::uint8_t>(is);
  q.spec.scheme = Scheme(detail::get<std::uint8_t>(is));
  q.spec.granularity = Granularity(detail::get<std::uint8_t>(is));
  auto rows = detail::get<std::uint32_t>(is);
  auto cols = detail::get<std::uint32_t>(is);
  std::size_t groups = q.spec.granularity == Granularity::PerTensor ? 1 : rows;
  q.scales.resize(groups);
  for (auto& s : q.scales) s = detail::get<float>(is);
  q.zero_points.resize(groups);
  for (auto& z : q.zero_points) z = detail::get<std::int32_t>(is);
  q.codes = CodeMat(rows, cols);
  is.read(reinterpret_cast<char*>(q.codes.data.data()), std::streamsize(q.codes.data.size()));
  if (!is) throw IoError("ABQT: truncated code block");
  q.validate();
  return q;
}

// ---- BitPlaneMatrix ("ABQP") -----------------------------------------------

inline void write_planes(std::ostream& os, const BitPlaneMatrix& m) {
  detail::put_magic(os, "ABQP");
  detail::put<std::uint16_t>(os, kFormatVersion);
  detail::put<std::uint8_t>(os, std::uint8_t(m.planes));
  detail::put<std::uint32_t>(os, std::uint32_t(m.rows));
  detail::put<std::uint32_t>(os, std::uint32_t(m.cols));
  detail::put<std::uint32_t>(os, std::uint32_t(m.words_per_row));
  for (std::uint64_t w : m.data) detail::put<std::uint64_t>(os, w);
}

inline BitPlaneMatrix read_planes(std::istream& is) {
  detail::expect_magic(is, "ABQP");
  auto version = detail::get<std::uint16_t>(is);
  if (version != kFormatVersion) throw IoError("ABQP: unsupported version");
  auto planes = detail::get<std::uint8_t>(is);
  auto rows = detail::get<std::uint32_t>(is);
  auto cols = detail::get<std::uint32_t>(is);
  auto wpr = detail::get<std::uint32_t>(is);
  BitPlaneMatrix m(planes, rows, cols);
  if (m.words_per_row != wpr) throw IoError("ABQP: inconsistent words_per_row");
  for (auto& w : m.data) w = detail::get<std::uint64_t>(is);
  return m;
}

// ---- named f32/f64 tensor records (shared by "ABQM" and "ABQC") ------------

namespace detail {

// "ABQM" stores tensors as f32, "ABQC" keeps calibration parameters at f64.
template <typename Elem>
inline void put_record(std::ostream& os, const std::string& name, const Mat& m) {
  put<std::uint16_t>(os, std::uint16_t(name.size()));
  os.write(name.data(), std::streamsize(name.size()));
  put<std::uint32_t>(os, std::uint32_t(m.rows));
  put<std::uint32_t>(os, std::uint32_t(m.cols));
  for (double v : m.data) put<Elem>(os, Elem(v));
}

template <typename Elem>
inline std::pair<std::string, Mat> get_record(std::istream& is) {
  auto len = get<std::uint16_t>(is);
  std::string name(len, '\0');
  is.read(name.data(), len);
  auto rows = get<std::uint32_t>(is);
  auto cols = get<std::uint32_t>(is);
  Mat m(rows, cols);
  for (auto& v : m.data) v = double(get<Elem>(is));
  return {std::move(name), std::move(m)};
}

}  // namespace detail

// ---- ToyBlock ("ABQM") -----------------------------------------------------

inline void write_block(std::ostream& os, const ToyBlock& b) {
  detail::put_magic(os, "ABQM");
  detail::put<std::uint16_t>(os, kFormatVersion);
  detail::put<std::uint32_t>(os, std::uint32_t(b.dim));
  detail::put<std::uint32_t>(os, std::uint32_t(b.heads));
  detail::put<std::uint32_t>(os, std::uint32_t(b.hidden));
  auto vec_mat = [](const std::vector<double>& v) {
    Mat m(1, v.size());
    for (std::size_t j = 0; j < v.size(); ++j) m(0, j) = v[j];
    return m;
  };
  detail::put<std::uint32_t>(os, 9);
  detail::put_record<float>(os, "q_proj", b.wq);
  detail::put_record<float>(os, "k_proj", b.wk);
  detail::put_record<float>(os, "v_proj", b.wv);
  detail::put_record<float>(os, "o_proj", b.wo);
  detail::put_record<float>(os, "gate_proj", b.wgate);
  detail::put_record<float>(os, "up_proj", b.wup);
  detail::put_record<float>(os, "down_proj", b.wdown);
  detail::put_record<float>(os, "norm1", vec_mat(b.norm1_gain));
  detail::put_record<float>(os, "norm2", vec_mat(b.norm2_gain));
}

inline ToyBlock read_block(std::istream& is) {
  detail::expect_magic(is, "ABQM");
  auto version = detail::get<std::uint16_t>(is);
  if (version != kFormatVersion) throw IoError("ABQM: unsupported version");
  ToyBlock b;
  b.dim = detail::get<std::uint32_t>(is);
  b.heads = detail::get<std::uint32_t>(is);
  b.hidden = detail::get<std::uint32_t>(is);
  auto count = detail::get<std::uint32_t>(is);
  std::map<std::string, Mat> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, m] = detail::get_record<float>(is);
    records.emplace(std::move(name), std::move(m));
  }
  auto need = [&](const char* name) -> Mat& {
    auto it = records.find(name);
    if (it == records.end()) throw IoError(std::string("ABQM: missing record ") + name);
    return it->second;
  };
  b.wq = need("q_proj");
  b.wk = need("k_proj");
  b.wv = need("v_proj");
  b.wo = need("o_proj");
  b.wgate = need("gate_proj");
  b.wup = need("up_proj");
  b.wdown = need("down_proj");
  b.norm1_gain = need("norm1").data;
  b.norm2_gain = need("norm2").data;
  return b;
}

// ---- CalibState ("ABQC") ---------------------------------------------------

inline void write_calib(std::ostream& os, const CalibState& st) {
  detail::put_magic(os, "ABQC");
  detail::put<std::uint16_t>(os, kFormatVersion);
  std::vector<std::pair<std::string, Mat>> records;
  auto vec_mat = [](const std::vector<double>& v) {
    Mat m(1, v.size());
    for (std::size_t j = 0; j < v.size(); ++j) m(0, j) = v[j];
    return m;
  };
  for (Layer l : kLayers) {
    const LayerParams& lp = st.params.at(l);
    std::string base = layer_name(l);
    records.emplace_back("s." + base, vec_mat(lp.s));
    records.emplace_back("alpha." + base, Mat(1, 1, lp.alpha));
    records.emplace_back("beta." + base, Mat(1, 1, lp.beta));
  }
  records.emplace_back("comp_a", vec_mat(st.params.comp_a));
  records.emplace_back("comp_b", vec_mat(st.params.comp_b));
  records.emplace_back("gamma", Mat(1, 1, double(st.params.gamma)));
  records.emplace_back("step", Mat(1, 1, double(st.step)));
  detail::put<std::uint32_t>(os, std::uint32_t(records.size()));
  for (const auto& [name, m] : records) detail::put_record<double>(os, name, m);
}

inline CalibState read_calib(std::istream& is) {
  detail::expect_magic(is, "ABQC");
  auto version = detail::get<std::uint16_t>(is);
  if (version != kFormatVersion) throw IoError("ABQC: unsupported version");
  auto count = detail::get<std::uint32_t>(is);
  std::map<std::string, Mat> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, m] = detail::get_record<double>(is);
    records.emplace(std::move(name), std::move(m));
  }
  CalibState st;
  auto need = [&](const std::string& name) -> Mat& {
    auto it = records.find(name);
    if (it == records.end()) throw IoError("ABQC: missing record " + name);
    return it->second;
  };
  for (Layer l : kLayers) {
    LayerParams& lp = st.params.at(l);
    std::string base = layer_name(l);
    lp.s = need("s." + base).data;
    lp.alpha = need("alpha." + base)(0, 0);
    lp.beta = need("beta." + base)(0, 0);
  }
  st.params.comp_a = need("comp_a").data;
  st.params.comp_b = need("comp_b").data;
  st.params.gamma = int(need("gamma")(0, 0));
  st.step = unsigned(need("step")(0, 0));
  return st;
}

// ---- CSV emission ----------------------------------------------------------

inline void write_loss_csv(std::ostream& os, const std::vector<LossSample>& history) {
  os << "step,loss,dlc,akl\n";
  for (const auto& s : history)
    os << s.step << "," << s.total << "," << s.dlc << "," << s.akl << "\n";
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchRecord>& records) {
  os << BenchRecord::csv_header() << "\n";
  for (const auto& r : records)
    os << r.config_id << "," << r.BM << "," << r.BN << "," << r.BK << "," << r.WM << ","
       << r.WN << "," << r.p << "," << r.q << "," << r.M << "," << r.N << "," << r.K << ","
       << r.median_us << "," << r.tops << "\n";
}

inline std::vector<BenchRecord> read_bench_csv(std::istream& is) {
  std::vector<BenchRecord> out;
  std::string line;
  if (!std::getline(is, line)) throw IoError("bench csv: empty");
  if (line != BenchRecord::csv_header()) throw IoError("bench csv: unexpected header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    BenchRecord r;
    std::string field;
    auto next = [&] {
      if (!std::getline(ss, field, ',')) throw IoError("bench csv: short row");
      return field;
    };
    r.config_id = next();
    r.BM = std::stoul(next());
    r.BN = std::stoul(next());
    r.BK = std::stoul(next());
    r.WM = std::stoul(next());
    r.WN = std::stoul(next());
    r.p = unsigned(std::stoul(next()));
    r.q = unsigned(std::stoul(next()));
    r.M = std::stoul(next());
    r.N = std::stoul(next());
    r.K = std::stoul(next());
    r.median_us = std::stod(next());
    r.tops = std::stod(next());
    out.push_back(std::move(r));
  }
  return out;
}

// ---- key=value configuration -----------------------------------------------

inline std::map<std::string, std::string> parse_config(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto strip = [](std::string s) {
      auto b = s.find_first_not_of(" \t\r");
      auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = strip(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError("config line " + std::to_string(lineno) + ": expected key=value");
    kv[strip(line.substr(0, eq))] = strip(line.substr(eq + 1));
  }
  return kv;
}

inline CalibOptions parse_calib_options(std::istream& is) {
  auto kv = parse_config(is);
  CalibOptions o;
  auto get = [&](const char* key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  if (auto* v = get("epochs")) o.epochs = unsigned(std::stoul(*v));
  if (auto* v = get("lr_s")) o.lr_s = std::stod(*v);
  if (auto* v = get("lr_clip")) o.lr_clip = std::stod(*v);
  if (auto* v = get("batch")) o.batch = unsigned(std::stoul(*v));
  if (auto* v = get("seed")) o.seed = std::stoull(*v);
  if (auto* v = get("bits_w")) o.bits_w = unsigned(std::stoul(*v));
  if (auto* v = get("bits_a")) o.bits_a = unsigned(std::stoul(*v));
  if (auto* v = get("segments")) o.segments = unsigned(std::stoul(*v));
  if (auto* v = get("tokens")) o.tokens = unsigned(std::stoul(*v));
  if (auto* v = get("dim")) o.dim = std::stoul(*v);
  if (auto* v = get("heads")) o.heads = std::stoul(*v);
  if (auto* v = get("block_index")) o.block_index = std::stoi(*v);
  if (auto* v = get("scheme")) {
    if (*v == "asymmetric") o.weight_scheme = Scheme::Asymmetric;
    else if (*v == "symmetric") o.weight_scheme = Scheme::Symmetric;
    else if (*v == "balanced") o.weight_scheme = Scheme::Balanced;
    else throw IoError("config: unknown scheme " + *v);
  }
  if (auto* v = get("gamma_blocks")) {
    o.gamma_blocks.clear();
    std::istringstream ss(*v);
    std::string tok;
    while (std::getline(ss, tok, ',')) o.gamma_blocks.push_back(std::stoi(tok));
  }
  return o;
}

// file-path conveniences

inline void save_block(const std::string& path, const ToyBlock& b) {
  auto os = detail::open_out(path);
  write_block(os, b);
}
inline ToyBlock load_block(const std::string& path) {
  auto is = detail::open_in(path);
  return read_block(is);
}
inline void save_calib(const std::string& path, const CalibState& st) {
  auto os = detail::open_out(path);
  write_calib(os, st);
}
inline CalibState load_calib(const std::string& path) {
  auto is = detail::open_in(path);
  return read_calib(is);
}

}  // namespace abq::io
