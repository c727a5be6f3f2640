#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "abq/core.hpp"
#include "abq/gemm.hpp"
#include "abq/quantizer.hpp"

namespace abq {

inline constexpr double kRmsEps = 1e-6;

/// Linear layers of the block, in forward order.
enum class Layer : int { Q = 0, K, V, O, Gate, Up, Down };
inline constexpr std::array<Layer, 7> kLayers = {Layer::Q, Layer::K, Layer::V, Layer::O,
                                                 Layer::Gate, Layer::Up, Layer::Down};
inline const char* layer_name(Layer l) {
  static const char* names[] = {"q_proj", "k_proj", "v_proj", "o_proj",
                                "gate_proj", "up_proj", "down_proj"};
  return names[int(l)];
}

/// Learnable quantization parameters of one linear layer.
struct LayerParams {
  std::vector<double> s;  // balance vector over the layer's input dimension
  double alpha = 1.0;
  double beta = 1.0;
};

/// Runtime quantization parameters of a whole block. Compensation applies to
/// down_proj only, gated by `gamma`.
struct BlockQuantParams {
  std::array<LayerParams, 7> layers;
  std::vector<double> comp_a;  // per down_proj output row, starts all-ones
  std::vector<double> comp_b;  // per down_proj input column, starts all-zeros
  int gamma = 0;

  LayerParams& at(Layer l) { return layers[int(l)]; }
  const LayerParams& at(Layer l) const { return layers[int(l)]; }
};

/// Activation/weight spec pair applied to every linear layer of the block.
struct BlockSpecs {
  QuantSpec act;     // per-token
  QuantSpec weight;  // per-channel

  static BlockSpecs make(unsigned bits_w, unsigned bits_a,
                         Scheme weight_scheme = Scheme::Asymmetric) {
    BlockSpecs s;
    s.act.bits = bits_a;
    s.act.scheme = Scheme::Asymmetric;
    s.act.granularity = Granularity::PerToken;
    s.weight.bits = bits_w;
    s.weight.scheme = weight_scheme;
    s.weight.granularity = Granularity::PerChannel;
    return s;
  }

  bool passthrough() const { return act.passthrough() || weight.passthrough(); }
};

/// Minimal pre-norm transformer block: attention with q/k/v/o projections and
/// a gated MLP, RMS-normalized, LLaMA style (no rotary embedding).
struct ToyBlock {
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t hidden = 86;
  Mat wq, wk, wv, wo;        // dim x dim, stored out x in
  Mat wgate, wup;            // hidden x dim
  Mat wdown;                 // dim x hidden
  std::vector<double> norm1_gain, norm2_gain;

  static ToyBlock seeded(std::uint64_t seed, std::size_t dim = 32, std::size_t heads = 4,
                         std::size_t hidden = 0) {
    if (hidden == 0) hidden = (8 * dim + 2) / 3;  // ~8/3 * dim
    if (dim % heads != 0) throw ValueError("ToyBlock: dim must be divisible by heads");
    ToyBlock b;
    b.dim = dim;
    b.heads = heads;
    b.hidden = hidden;
    Rng rng(seed);
    double ws = 1.0 / std::sqrt(double(dim));
    b.wq = rng.gauss_matrix(dim, dim, ws);
    b.wk = rng.gauss_matrix(dim, dim, ws);
    b.wv = rng.gauss_matrix(dim, dim, ws);
    b.wo = rng.gauss_matrix(dim, dim, ws);
    b.wgate = rng.gauss_matrix(hidden, dim, ws);
    b.wup = rng.gauss_matrix(hidden, dim, ws);
    b.wdown = rng.gauss_matrix(dim, hidden, 1.0 / std::sqrt(double(hidden)));
    b.norm1_gain.assign(dim, 1.0);
    b.norm2_gain.assign(dim, 1.0);
    return b;
  }

  const Mat& weight(Layer l) const {
    switch (l) {
      case Layer::Q: return wq;
      case Layer::K: return wk;
      case Layer::V: return wv;
      case Layer::O: return wo;
      case Layer::Gate: return wgate;
      case Layer::Up: return wup;
      case Layer::Down: return wdown;
    }
    throw ValueError("ToyBlock: unknown layer");
  }

  BlockQuantParams init_params() const {
    BlockQuantParams p;
    for (Layer l : kLayers) p.at(l).s.assign(weight(l).cols, 1.0);
    p.comp_a.assign(dim, 1.0);
    p.comp_b.assign(hidden, 0.0);
    return p;
  }
};

/// One recorded engine event inside a quantized forward.
struct TraceEvent {
  std::string layer;
  bool requant = false;
  bool bitpack = false;
  bool dequant = false;
};

struct ForwardTrace {
  std::vector<Mat> attention;  // one (tokens x tokens) probability map per head
  std::vector<TraceEvent> events;
};

namespace detail {

inline Mat rmsnorm(const Mat& x, const std::vector<double>& gain) {
  Mat out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double msq = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) msq += x(i, j) * x(i, j);
    double inv = 1.0 / std::sqrt(msq / double(x.cols) + kRmsEps);
    for (std::size_t j = 0; j < x.cols; ++j) out(i, j) = x(i, j) * inv * gain[j];
  }
  return out;
}

inline Mat linear_fp(const Mat& x, const Mat& w) {  // y = x * w^T
  return matmul(x, w.transposed());
}

inline Mat silu(const Mat& x) {
  Mat out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.data.size(); ++i)
    out.data[i] = x.data[i] / (1.0 + std::exp(-x.data[i]));
  return out;
}

/// Softmax attention over all keys for one head's slice.
inline void attention(const Mat& q, const Mat& k, const Mat& v, std::size_t heads,
                      std::vector<Mat>& probs, Mat& ctx) {
  const std::size_t tokens = q.rows, dim = q.cols, dh = dim / heads;
  ctx = Mat(tokens, dim);
  probs.clear();
  for (std::size_t h = 0; h < heads; ++h) {
    Mat p(tokens, tokens);
    for (std::size_t i = 0; i < tokens; ++i) {
      double mx = -1e300;
      for (std::size_t j = 0; j < tokens; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < dh; ++d) s += q(i, h * dh + d) * k(j, h * dh + d);
        p(i, j) = s / std::sqrt(double(dh));
        mx = std::max(mx, p(i, j));
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < tokens; ++j) {
        p(i, j) = std::exp(p(i, j) - mx);
        sum += p(i, j);
      }
      for (std::size_t j = 0; j < tokens; ++j) p(i, j) /= sum;
    }
    for (std::size_t i = 0; i < tokens; ++i)
      for (std::size_t d = 0; d < dh; ++d) {
        double s = 0.0;
        for (std::size_t j = 0; j < tokens; ++j) s += p(i, j) * v(j, h * dh + d);
        ctx(i, h * dh + d) = s;
      }
    probs.push_back(std::move(p));
  }
}

}  // namespace detail

inline std::pair<Mat, ForwardTrace> forward_fp(const ToyBlock& block, const Mat& x) {
  if (x.cols != block.dim) throw ShapeError("forward_fp: input width must equal block dim");
  ForwardTrace trace;
  Mat h1 = detail::rmsnorm(x, block.norm1_gain);
  Mat q = detail::linear_fp(h1, block.wq);
  Mat k = detail::linear_fp(h1, block.wk);
  Mat v = detail::linear_fp(h1, block.wv);
  Mat ctx;
  detail::attention(q, k, v, block.heads, trace.attention, ctx);
  Mat attn_out = detail::linear_fp(ctx, block.wo);
  Mat x2(x.rows, x.cols);
  for (std::size_t i = 0; i < x.data.size(); ++i) x2.data[i] = x.data[i] + attn_out.data[i];
  Mat h2 = detail::rmsnorm(x2, block.norm2_gain);
  Mat gate = detail::linear_fp(h2, block.wgate);
  Mat up = detail::linear_fp(h2, block.wup);
  Mat act = detail::silu(gate);
  for (std::size_t i = 0; i < act.data.size(); ++i) act.data[i] *= up.data[i];
  Mat down = detail::linear_fp(act, block.wdown);
  Mat out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = x2.data[i] + down.data[i];
  return {std::move(out), std::move(trace)};
}

namespace detail {

/// Engine-path linear: ReQuant the activation per token, quantize the scaled
/// weight per channel, run the bit-plane GEMM, DeQuant the result.
inline Mat quant_linear(const Mat& x, const Mat& w, const BlockSpecs& specs,
                        const LayerParams& lp, const std::optional<CompensationPair>& comp,
                        const char* name, ForwardTrace& trace) {
  if (specs.passthrough()) {
    return linear_fp(x, w);
  }
  Mat xs = x;
  Mat ws = w;
  if (!lp.s.empty()) {
    if (lp.s.size() != w.cols) throw ShapeError("quant_linear: balance vector length");
    for (std::size_t i = 0; i < x.rows; ++i)
      for (std::size_t j = 0; j < x.cols; ++j) xs(i, j) /= lp.s[j];
    for (std::size_t i = 0; i < w.rows; ++i)
      for (std::size_t j = 0; j < w.cols; ++j) ws(i, j) *= lp.s[j];
  }
  QuantSpec aspec = specs.act;
  QuantSpec wspec = specs.weight;
  wspec.alpha = lp.alpha;
  wspec.beta = lp.beta;

  QuantizedTensor qa = quantize(xs, aspec);  // ReQuant
  QuantizedTensor qw = quantize(ws, wspec, comp);
  Mat y = quantized_linear(qa, qw);  // BitPacking + GEMM + DeQuant inside
  trace.events.push_back({name, true, true, true});
  return y;
}

}  // namespace detail

/// Quantized block forward on the bit-plane engine. Softmax and normalization
/// stay in real arithmetic; every projection goes through
/// quantize -> bitpack -> gemm -> zero-point correction -> dequantize.
inline std::pair<Mat, ForwardTrace> forward_quant(const ToyBlock& block, const Mat& x,
                                                  const BlockSpecs& specs,
                                                  const BlockQuantParams& params) {
  if (x.cols != block.dim) throw ShapeError("forward_quant: input width must equal block dim");
  ForwardTrace trace;
  std::optional<CompensationPair> comp;
  if (params.gamma) comp = CompensationPair{params.comp_a, params.comp_b};

  Mat h1 = detail::rmsnorm(x, block.norm1_gain);
  Mat q = detail::quant_linear(h1, block.wq, specs, params.at(Layer::Q), std::nullopt, "q_proj", trace);
  Mat k = detail::quant_linear(h1, block.wk, specs, params.at(Layer::K), std::nullopt, "k_proj", trace);
  Mat v = detail::quant_linear(h1, block.wv, specs, params.at(Layer::V), std::nullopt, "v_proj", trace);
  Mat ctx;
  detail::attention(q, k, v, block.heads, trace.attention, ctx);
  Mat attn_out =
      detail::quant_linear(ctx, block.wo, specs, params.at(Layer::O), std::nullopt, "o_proj", trace);
  Mat x2(x.rows, x.cols);
  for (std::size_t i = 0; i < x.data.size(); ++i) x2.data[i] = x.data[i] + attn_out.data[i];
  Mat h2 = detail::rmsnorm(x2, block.norm2_gain);
  Mat gate = detail::quant_linear(h2, block.wgate, specs, params.at(Layer::Gate), std::nullopt,
                                  "gate_proj", trace);
  Mat up =
      detail::quant_linear(h2, block.wup, specs, params.at(Layer::Up), std::nullopt, "up_proj", trace);
  Mat act = detail::silu(gate);
  for (std::size_t i = 0; i < act.data.size(); ++i) act.data[i] *= up.data[i];
  Mat down =
      detail::quant_linear(act, block.wdown, specs, params.at(Layer::Down), comp, "down_proj", trace);
  Mat out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = x2.data[i] + down.data[i];
  return {std::move(out), std::move(trace)};
}

/// Mean attention mass on the first key, over all heads and queries.
inline double first_token_attention_share(const ForwardTrace& trace) {
  if (trace.attention.empty()) throw ValueError("first_token_attention_share: no attention maps");
  double sum = 0.0;
  std::size_t count = 0;
  for (const Mat& p : trace.attention)
    for (std::size_t i = 0; i < p.rows; ++i) {
      sum += p(i, 0);
      ++count;
    }
  return sum / double(count);
}

}  // namespace abq
