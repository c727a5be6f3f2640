#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "abq/autodiff.hpp"
#include "abq/core.hpp"
#include "abq/log.hpp"
#include "abq/losses.hpp"
#include "abq/toyblock.hpp"

namespace abq {

struct CalibOptions {
  unsigned epochs = 20;
  double lr_s = 5e-3;
  double lr_clip = 1e-2;  // alpha, beta and the compensation vectors
  unsigned batch = 1;
  std::uint64_t seed = 42;
  unsigned bits_w = 4;
  unsigned bits_a = 4;
  Scheme weight_scheme = Scheme::Asymmetric;
  std::vector<int> gamma_blocks = {0};  // block indices with compensation active
  int block_index = 0;
  unsigned segments = 128;  // calibration sequences
  unsigned tokens = 16;
  std::size_t dim = 32;
  std::size_t heads = 4;

  bool gamma_active() const {
    for (int b : gamma_blocks)
      if (b == block_index) return true;
    return false;
  }
};

struct LossSample {
  unsigned step = 0;
  double total = 0.0;
  double dlc = 0.0;
  double akl = 0.0;
};

/// Learnable parameters plus optimizer state and loss history.
struct CalibState {
  BlockQuantParams params;
  std::vector<LossSample> history;
  unsigned step = 0;
  // Adam moments, keyed like the flattened parameter vector.
  std::vector<double> m1, m2;
};

namespace calib {

/// Simulated per-axis round-clamp quantizer on the tape. Returns the
/// dequantized value; rounding and clamping are straight-through nodes.
inline ad::Val fake_quant_rows(ad::Val v, unsigned bits, Scheme scheme, ad::Val* alpha_node,
                               ad::Val* beta_node) {
  ad::Tape& t = *v.tape;
  const unsigned levels = scheme == Scheme::Balanced ? (1u << bits) + 1 : (1u << bits);
  ad::Val step, zp;
  if (scheme == Scheme::Balanced) {
    ad::Val amax = ad::max_elem(ad::row_max(v), ad::neg(ad::row_min(v)));
    double half = double(1u << (bits - 1));
    step = ad::div(amax, t.scalar(half));
    zp = t.scalar(half);
  } else {
    ad::Val hi = ad::row_max(v);
    ad::Val lo = ad::row_min(v);
    if (alpha_node) hi = ad::mul(hi, *alpha_node);
    if (beta_node) lo = ad::mul(lo, *beta_node);
    step = ad::div(ad::sub(hi, lo), t.scalar(double(levels - 1)));
    zp = ad::clamp_ste(ad::round_ste(ad::div(ad::neg(lo), step)), 0.0, double(levels - 1));
  }
  ad::Val codes =
      ad::clamp_ste(ad::add(ad::round_ste(ad::div(v, step)), zp), 0.0, double(levels - 1));
  return ad::mul(ad::sub(codes, zp), step);
}

struct TapeLayerParams {
  ad::Val s;      // 1 x in row vector
  ad::Val alpha;  // 1 x 1
  ad::Val beta;   // 1 x 1
};

/// x * w^T through simulated quantization with balance, clip and optional
/// compensation, mirroring the engine path arithmetic.
inline ad::Val quant_linear(ad::Val x, const Mat& w, const BlockSpecs& specs,
                            TapeLayerParams& lp, ad::Val* comp_a, ad::Val* comp_b) {
  ad::Tape& t = *x.tape;
  if (specs.passthrough()) {
    return ad::matmul(x, t.constant(w.transposed()));
  }
  ad::Val xs = ad::div(x, lp.s);                       // diag(s)^-1 on activations
  ad::Val ws = ad::mul(t.constant(w), lp.s);           // diag(s) on weight columns
  if (comp_a && comp_b) {
    ws = ad::add(ws, ad::matmul(*comp_a, *comp_b));    // + a b^T
  }
  ad::Val xq = fake_quant_rows(xs, specs.act.bits, specs.act.scheme, nullptr, nullptr);
  ad::Val wq = fake_quant_rows(ws, specs.weight.bits, specs.weight.scheme, &lp.alpha, &lp.beta);
  return ad::matmul(xq, ad::transpose(wq));
}

inline ad::Val rmsnorm(ad::Val x, const std::vector<double>& gain) {
  ad::Tape& t = *x.tape;
  std::size_t d = t.value(x).cols;
  ad::Val msq = ad::div(ad::row_sum(ad::mul(x, x)), t.scalar(double(d)));
  ad::Val denom = ad::sqrt(ad::add(msq, t.scalar(kRmsEps)));
  Mat g(1, d);
  for (std::size_t j = 0; j < d; ++j) g(0, j) = gain[j];
  return ad::mul(ad::div(x, denom), t.constant(g));
}

struct TapeForward {
  ad::Val output;
  std::vector<ad::Val> attention;  // per head probability maps
};

struct TapeBlockParams {
  std::array<TapeLayerParams, 7> layers;
  ad::Val comp_a;  // dim x 1
  ad::Val comp_b;  // 1 x hidden
  bool gamma = false;
};

/// Quantized block forward as a differentiable tape expression.
inline TapeForward build_forward(ad::Tape& t, const ToyBlock& block, const Mat& x,
                                 const BlockSpecs& specs, TapeBlockParams& p) {
  ad::Val xin = t.constant(x);
  ad::Val h1 = rmsnorm(xin, block.norm1_gain);
  ad::Val q = quant_linear(h1, block.wq, specs, p.layers[int(Layer::Q)], nullptr, nullptr);
  ad::Val k = quant_linear(h1, block.wk, specs, p.layers[int(Layer::K)], nullptr, nullptr);
  ad::Val v = quant_linear(h1, block.wv, specs, p.layers[int(Layer::V)], nullptr, nullptr);

  const std::size_t dh = block.dim / block.heads;
  std::vector<ad::Val> ctx_heads;
  TapeForward fwd;
  for (std::size_t h = 0; h < block.heads; ++h) {
    ad::Val qh = ad::slice_cols(q, h * dh, dh);
    ad::Val kh = ad::slice_cols(k, h * dh, dh);
    ad::Val vh = ad::slice_cols(v, h * dh, dh);
    ad::Val scores =
        ad::div(ad::matmul(qh, ad::transpose(kh)), t.scalar(std::sqrt(double(dh))));
    ad::Val probs = ad::softmax_rows(scores);
    fwd.attention.push_back(probs);
    ctx_heads.push_back(ad::matmul(probs, vh));
  }
  ad::Val ctx = ad::concat_cols(ctx_heads);
  ad::Val attn_out = quant_linear(ctx, block.wo, specs, p.layers[int(Layer::O)], nullptr, nullptr);
  ad::Val x2 = ad::add(xin, attn_out);
  ad::Val h2 = rmsnorm(x2, block.norm2_gain);
  ad::Val gate = quant_linear(h2, block.wgate, specs, p.layers[int(Layer::Gate)], nullptr, nullptr);
  ad::Val up = quant_linear(h2, block.wup, specs, p.layers[int(Layer::Up)], nullptr, nullptr);
  ad::Val act = ad::mul(ad::mul(gate, ad::sigmoid(gate)), up);
  ad::Val down = quant_linear(act, block.wdown, specs, p.layers[int(Layer::Down)],
                              p.gamma ? &p.comp_a : nullptr, p.gamma ? &p.comp_b : nullptr);
  fwd.output = ad::add(x2, down);
  return fwd;
}

/// mean over tokens of [-log cos(yq, ref)] for a constant reference.
inline ad::Val dlc_term(ad::Val yq, const Mat& ref) {
  ad::Tape& t = *yq.tape;
  ad::Val r = t.constant(ref);
  ad::Val dot = ad::row_sum(ad::mul(yq, r));
  ad::Val nq = ad::sqrt(ad::row_sum(ad::mul(yq, yq)));
  ad::Val nr = ad::sqrt(ad::row_sum(ad::mul(r, r)));
  ad::Val cos = ad::clamp_ste(ad::div(dot, ad::mul(nq, nr)), kCosineFloor, 1.0);
  return ad::mean_all(ad::neg(ad::log(cos)));
}

inline ad::Val dlc_on_tape(ad::Val yq, const Mat& d_fp, const Mat& d_fp_star) {
  return ad::add(dlc_term(yq, d_fp), dlc_term(yq, d_fp_star));
}

/// Symmetric KL between tape attention maps and constant references,
/// floored and renormalized, averaged over heads and queries.
inline ad::Val akl_on_tape(const std::vector<ad::Val>& attn_q, const std::vector<Mat>& attn_fp) {
  ad::Tape& t = *attn_q[0].tape;
  ad::Val sum = t.scalar(0.0);
  for (std::size_t h = 0; h < attn_q.size(); ++h) {
    ad::Val pq_raw = ad::clamp_ste(attn_q[h], kProbFloor, 2.0);
    ad::Val pq = ad::div(pq_raw, ad::row_sum(pq_raw));
    Mat fp = attn_fp[h];
    for (auto& v : fp.data) v = std::max(v, kProbFloor);
    for (std::size_t i = 0; i < fp.rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < fp.cols; ++j) s += fp(i, j);
      for (std::size_t j = 0; j < fp.cols; ++j) fp(i, j) /= s;
    }
    ad::Val pf = t.constant(fp);
    ad::Val lq = ad::log(pq);
    ad::Val lf = t.constant([&] {
      Mat m = fp;
      for (auto& v : m.data) v = std::log(v);
      return m;
    }());
    ad::Val diff = ad::sub(lq, lf);
    ad::Val kl_q = ad::row_sum(ad::mul(pq, diff));           // D(q||fp) rows
    ad::Val kl_f = ad::row_sum(ad::mul(pf, ad::neg(diff)));  // D(fp||q) rows
    sum = ad::add(sum, ad::mean_all(ad::add(kl_q, kl_f)));
  }
  return ad::div(sum, t.scalar(double(attn_q.size())));
}

struct LossBreakdown {
  ad::Val total, dlc, akl;
};

inline LossBreakdown build_loss(const TapeForward& fwd, const Mat& d_fp, const Mat& d_fp_star,
                                const std::vector<Mat>& attn_fp) {
  LossBreakdown l;
  l.dlc = dlc_on_tape(fwd.output, d_fp, d_fp_star);
  l.akl = akl_on_tape(fwd.attention, attn_fp);
  l.total = ad::add(l.dlc, l.akl);
  return l;
}

/// Bind the current CalibState parameters as tape leaves.
inline TapeBlockParams bind_params(ad::Tape& t, const ToyBlock& block,
                                   const BlockQuantParams& p, bool gamma) {
  TapeBlockParams tp;
  for (Layer l : kLayers) {
    const LayerParams& lp = p.at(l);
    Mat s(1, lp.s.size());
    for (std::size_t j = 0; j < lp.s.size(); ++j) s(0, j) = lp.s[j];
    tp.layers[int(l)].s = t.param(std::move(s));
    tp.layers[int(l)].alpha = t.param(Mat(1, 1, lp.alpha));
    tp.layers[int(l)].beta = t.param(Mat(1, 1, lp.beta));
  }
  Mat a(block.dim, 1), b(1, block.hidden);
  for (std::size_t i = 0; i < block.dim; ++i) a(i, 0) = p.comp_a[i];
  for (std::size_t j = 0; j < block.hidden; ++j) b(0, j) = p.comp_b[j];
  tp.comp_a = t.param(std::move(a));
  tp.comp_b = t.param(std::move(b));
  tp.gamma = gamma;
  return tp;
}

}  // namespace calib

namespace detail {

/// Flat view over all learnable parameters for the optimizer.
struct ParamView {
  std::vector<double*> values;
  std::vector<double> lr;
  std::vector<const Mat*> grads;        // tape grads, same flattened order
  std::vector<std::size_t> grad_index;  // index into the grad matrix
};

inline ParamView flatten(BlockQuantParams& p, calib::TapeBlockParams& tp, ad::Tape& t,
                         const CalibOptions& opts) {
  ParamView v;
  auto push = [&](double* slot, double lr, const Mat& g, std::size_t gi) {
    v.values.push_back(slot);
    v.lr.push_back(lr);
    v.grads.push_back(&g);
    v.grad_index.push_back(gi);
  };
  for (Layer l : kLayers) {
    LayerParams& lp = p.at(l);
    calib::TapeLayerParams& tlp = tp.layers[int(l)];
    for (std::size_t j = 0; j < lp.s.size(); ++j)
      push(&lp.s[j], opts.lr_s, t.grad(tlp.s), j);
    push(&lp.alpha, opts.lr_clip, t.grad(tlp.alpha), 0);
    push(&lp.beta, opts.lr_clip, t.grad(tlp.beta), 0);
  }
  if (tp.gamma) {
    for (std::size_t i = 0; i < p.comp_a.size(); ++i)
      push(&p.comp_a[i], opts.lr_clip, t.grad(tp.comp_a), i);
    for (std::size_t j = 0; j < p.comp_b.size(); ++j)
      push(&p.comp_b[j], opts.lr_clip, t.grad(tp.comp_b), j);
  }
  return v;
}

inline void project(BlockQuantParams& p) {
  for (Layer l : kLayers) {
    LayerParams& lp = p.at(l);
    for (double& s : lp.s) s = std::max(s, 1e-4);
    lp.alpha = std::clamp(lp.alpha, 1e-4, 1.0);
    lp.beta = std::clamp(lp.beta, 1e-4, 1.0);
  }
}

}  // namespace detail

/// Block-wise calibration: AdamW without weight decay on {s, alpha, beta, a, b}
/// against DLC + AKL, gradients straight-through.
inline CalibState calibrate_block(const ToyBlock& block, const std::vector<Mat>& calib_data,
                                  const BlockSpecs& specs, const CalibOptions& opts) {
  if (calib_data.empty()) throw ValueError("calibrate_block: no calibration data");
  CalibState state;
  state.params = block.init_params();
  state.params.gamma = opts.gamma_active() ? 1 : 0;

  // Full-precision references and simulated previous-block quantized inputs.
  struct Refs {
    Mat xq, d_fp, d_fp_star;
    std::vector<Mat> attn_fp;
  };
  std::vector<Refs> refs;
  for (const Mat& x : calib_data) {
    Refs r;
    if (specs.passthrough()) {
      r.xq = x;
    } else {
      r.xq = dequantize(quantize(x, specs.act));
    }
    auto [d_fp, tr_fp] = forward_fp(block, x);
    auto [d_fp_star, tr_star] = forward_fp(block, r.xq);
    r.d_fp = std::move(d_fp);
    r.d_fp_star = std::move(d_fp_star);
    r.attn_fp = std::move(tr_fp.attention);
    refs.push_back(std::move(r));
  }

  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  bool moments_ready = false;

  for (unsigned epoch = 0; epoch < opts.epochs; ++epoch) {
    for (std::size_t bi = 0; bi < refs.size(); ++bi) {
      ad::Tape tape;
      auto tp = calib::bind_params(tape, block, state.params, state.params.gamma == 1);
      auto fwd = calib::build_forward(tape, block, refs[bi].xq, specs, tp);
      auto loss = calib::build_loss(fwd, refs[bi].d_fp, refs[bi].d_fp_star, refs[bi].attn_fp);

      double total = tape.value(loss.total)(0, 0);
      double dlc = tape.value(loss.dlc)(0, 0);
      double akl = tape.value(loss.akl)(0, 0);
      if (!std::isfinite(total)) {
        throw Error("calibrate_block: non-finite loss at step " + std::to_string(state.step));
      }
      state.history.push_back({state.step, total, dlc, akl});

      if (specs.passthrough()) {
        // quantized path is exact; nothing to learn
        return state;
      }

      tape.backward(loss.total);
      auto view = detail::flatten(state.params, tp, tape, opts);
      if (!moments_ready) {
        state.m1.assign(view.values.size(), 0.0);
        state.m2.assign(view.values.size(), 0.0);
        moments_ready = true;
      }
      const unsigned t_step = state.step + 1;
      for (std::size_t i = 0; i < view.values.size(); ++i) {
        double g = view.grads[i]->data[view.grad_index[i]];
        state.m1[i] = beta1 * state.m1[i] + (1.0 - beta1) * g;
        state.m2[i] = beta2 * state.m2[i] + (1.0 - beta2) * g * g;
        double mhat = state.m1[i] / (1.0 - std::pow(beta1, t_step));
        double vhat = state.m2[i] / (1.0 - std::pow(beta2, t_step));
        *view.values[i] -= view.lr[i] * mhat / (std::sqrt(vhat) + eps);
      }
      detail::project(state.params);
      ++state.step;
    }
  }

  log(LogLevel::Info, "calibration: %u steps, loss %.6f -> %.6f", state.step,
      state.history.empty() ? 0.0 : state.history.front().total,
      state.history.empty() ? 0.0 : state.history.back().total);
  return state;
}

/// Total loss of the current parameters on one batch, engine-free. Used by
/// tests and the gradient oracle.
inline LossSample evaluate_loss(const ToyBlock& block, const Mat& x, const BlockSpecs& specs,
                                const BlockQuantParams& params) {
  Mat xq = specs.passthrough() ? x : dequantize(quantize(x, specs.act));
  auto [d_fp, tr_fp] = forward_fp(block, x);
  auto [d_fp_star, tr_star] = forward_fp(block, xq);
  ad::Tape tape;
  auto tp = calib::bind_params(tape, block, params, params.gamma == 1);
  auto fwd = calib::build_forward(tape, block, xq, specs, tp);
  auto loss = calib::build_loss(fwd, d_fp, d_fp_star, tr_fp.attention);
  LossSample s;
  s.total = tape.value(loss.total)(0, 0);
  s.dlc = tape.value(loss.dlc)(0, 0);
  s.akl = tape.value(loss.akl)(0, 0);
  return s;
}

}  // namespace abq
