#pragma once

// Fine- and coarse-grained attention.
//
// States are (b + n) x d in summary-first order: rows [0, b) are the bar
// summaries, rows [b, b + n) the music tokens. One FC step runs
//   summarization:  s~_i = Attn(s_i, [X_i, s_i])
//   aggregation:    x~_ij = Attn(x_ij, [X_R(i), X_{i,k<=j}, S~_Rbar(i)])
// with the layouts of a LayoutBundle deciding which sources each query sees.
//
// Parameter sharing: the query, key and value projections are shared by both
// steps and by both token types, each type adding its own bias (row 0 music,
// row 1 summary). Fresh summaries S~ used as aggregation sources get their
// own key/value projections.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

#include "museformer/attention.hpp"
#include "museformer/layout.hpp"
#include "museformer/tensor.hpp"

namespace museformer {

inline constexpr Eigen::Index kMusicType = 0;
inline constexpr Eigen::Index kSummaryType = 1;

template <typename S>
struct AttentionParams {
  Matrix<S> w_q, w_k, w_v;      // d x d
  Matrix<S> b_q, b_k, b_v;      // 2 x d, one row per token type
  Matrix<S> w_k_sum, w_v_sum;   // d x d, summaries as aggregation sources
  Matrix<S> b_k_sum, b_v_sum;   // 1 x d
  Matrix<S> w_o, b_o;           // d x d, 1 x d

  static AttentionParams zeros(Eigen::Index d) {
    AttentionParams p;
    p.w_q = p.w_k = p.w_v = p.w_k_sum = p.w_v_sum = p.w_o = Matrix<S>::Zero(d, d);
    p.b_q = p.b_k = p.b_v = Matrix<S>::Zero(2, d);
    p.b_k_sum = p.b_v_sum = p.b_o = Matrix<S>::Zero(1, d);
    return p;
  }

  template <typename P, typename F>
  static void each(P& p, F&& f) {
    f("w_q", p.w_q);
    f("w_k", p.w_k);
    f("w_v", p.w_v);
    f("b_q", p.b_q);
    f("b_k", p.b_k);
    f("b_v", p.b_v);
    f("w_k_sum", p.w_k_sum);
    f("w_v_sum", p.w_v_sum);
    f("b_k_sum", p.b_k_sum);
    f("b_v_sum", p.b_v_sum);
    f("w_o", p.w_o);
    f("b_o", p.b_o);
  }
  template <typename F>
  void for_each(F&& f) {
    each(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    each(*this, f);
  }
};

template <typename S>
struct FcAttentionCache {
  Matrix<S> input;
  Matrix<S> q, k_self, v_self;   // projections of every row, typed biases applied
  Matrix<S> k_agg, v_agg;        // [summary-source projections of S~; music rows of k_self/v_self]
  Matrix<S> ctx_sum, ctx_music;
  Matrix<S> summaries;           // S~
  AttentionWeights<S> w_sum, w_music;
};

namespace detail {

template <typename S>
Matrix<S> typed_projection(const Matrix<S>& x, const Matrix<S>& w, const Matrix<S>& bias, Eigen::Index bars) {
  Matrix<S> y = x * w;
  y.topRows(bars).rowwise() += bias.row(kSummaryType);
  y.bottomRows(y.rows() - bars).rowwise() += bias.row(kMusicType);
  return y;
}

template <typename S>
void typed_bias_backward(const Matrix<S>& dy, Eigen::Index bars, Matrix<S>& dbias) {
  dbias.row(kSummaryType) += dy.topRows(bars).colwise().sum();
  dbias.row(kMusicType) += dy.bottomRows(dy.rows() - bars).colwise().sum();
}

}  // namespace detail

/// Runs summarization then aggregation; returns [S~; X~].
template <typename S>
Matrix<S> fc_attention(const Matrix<S>& states, const LayoutBundle& layouts, const AttentionParams<S>& p, int heads,
                       std::type_identity_t<FcAttentionCache<S>>* cache = nullptr) {
  const auto bars = static_cast<Eigen::Index>(layouts.summary.rows());
  const auto music = static_cast<Eigen::Index>(layouts.aggregation.rows());
  if (states.rows() != bars + music) throw std::invalid_argument("fc_attention: state rows != bars + music tokens");

  FcAttentionCache<S> local;
  FcAttentionCache<S>& c = cache ? *cache : local;
  c.input = states;
  c.q = detail::typed_projection(states, p.w_q, p.b_q, bars);
  c.k_self = detail::typed_projection(states, p.w_k, p.b_k, bars);
  c.v_self = detail::typed_projection(states, p.w_v, p.b_v, bars);

  Matrix<S> q_sum = c.q.topRows(bars);
  c.ctx_sum = masked_attention(q_sum, c.k_self, c.v_self, layouts.summary_rows, heads, &c.w_sum);
  c.summaries = affine(c.ctx_sum, p.w_o, p.b_o);

  const Eigen::Index d = states.cols();
  c.k_agg.resize(bars + music, d);
  c.v_agg.resize(bars + music, d);
  c.k_agg.topRows(bars) = affine(c.summaries, p.w_k_sum, p.b_k_sum);
  c.v_agg.topRows(bars) = affine(c.summaries, p.w_v_sum, p.b_v_sum);
  c.k_agg.bottomRows(music) = c.k_self.bottomRows(music);
  c.v_agg.bottomRows(music) = c.v_self.bottomRows(music);

  Matrix<S> q_music = c.q.bottomRows(music);
  c.ctx_music = masked_attention(q_music, c.k_agg, c.v_agg, layouts.aggregation_rows, heads, &c.w_music);

  Matrix<S> out(bars + music, d);
  out.topRows(bars) = c.summaries;
  out.bottomRows(music) = affine(c.ctx_music, p.w_o, p.b_o);
  return out;
}

/// Gradient of fc_attention; accumulates into `grads`, returns d(states).
template <typename S>
Matrix<S> fc_attention_backward(const FcAttentionCache<S>& c, const LayoutBundle& layouts,
                                const AttentionParams<S>& p, int heads, const Matrix<S>& dout,
                                AttentionParams<S>& grads) {
  const auto bars = static_cast<Eigen::Index>(layouts.summary.rows());
  const auto music = static_cast<Eigen::Index>(layouts.aggregation.rows());

  Matrix<S> dsum = dout.topRows(bars);
  Matrix<S> dx_out = dout.bottomRows(music);

  // aggregation
  Matrix<S> dctx_music = affine_backward(c.ctx_music, p.w_o, dx_out, grads.w_o, grads.b_o);
  Matrix<S> q_music = c.q.bottomRows(music);
  Matrix<S> dq_music = zeros_like(q_music);
  Matrix<S> dk_agg = zeros_like(c.k_agg), dv_agg = zeros_like(c.v_agg);
  masked_attention_backward(q_music, c.k_agg, c.v_agg, layouts.aggregation_rows, heads, c.w_music, dctx_music,
                            dq_music, dk_agg, dv_agg);
  Matrix<S> dk_t = dk_agg.topRows(bars), dv_t = dv_agg.topRows(bars);
  dsum += affine_backward(c.summaries, p.w_k_sum, dk_t, grads.w_k_sum, grads.b_k_sum);
  dsum += affine_backward(c.summaries, p.w_v_sum, dv_t, grads.w_v_sum, grads.b_v_sum);

  // summarization
  Matrix<S> dctx_sum = affine_backward(c.ctx_sum, p.w_o, dsum, grads.w_o, grads.b_o);
  Matrix<S> q_sum = c.q.topRows(bars);
  Matrix<S> dq_sum = zeros_like(q_sum);
  Matrix<S> dk_self = zeros_like(c.k_self), dv_self = zeros_like(c.v_self);
  masked_attention_backward(q_sum, c.k_self, c.v_self, layouts.summary_rows, heads, c.w_sum, dctx_sum, dq_sum,
                            dk_self, dv_self);
  dk_self.bottomRows(music) += dk_agg.bottomRows(music);
  dv_self.bottomRows(music) += dv_agg.bottomRows(music);

  Matrix<S> dq(bars + music, c.q.cols());
  dq.topRows(bars) = dq_sum;
  dq.bottomRows(music) = dq_music;

  grads.w_q.noalias() += c.input.transpose() * dq;
  grads.w_k.noalias() += c.input.transpose() * dk_self;
  grads.w_v.noalias() += c.input.transpose() * dv_self;
  detail::typed_bias_backward(dq, bars, grads.b_q);
  detail::typed_bias_backward(dk_self, bars, grads.b_k);
  detail::typed_bias_backward(dv_self, bars, grads.b_v);

  Matrix<S> dstates = dq * p.w_q.transpose();
  dstates.noalias() += dk_self * p.w_k.transpose();
  dstates.noalias() += dv_self * p.w_v.transpose();
  return dstates;
}

// ---------------------------------------------------------------------------
// Full layer

enum class NormPlacement : std::uint8_t { pre, post };

struct LayerOptions {
  NormPlacement norm = NormPlacement::pre;
  // Summary rows pass through the feed-forward block as well.
  bool ffn_on_summaries = true;
  int heads = 4;
};

template <typename S>
struct LayerParams {
  AttentionParams<S> attn;
  Matrix<S> ln1_gain, ln1_bias, ln2_gain, ln2_bias;  // 1 x d
  Matrix<S> ffn_w1, ffn_b1, ffn_w2, ffn_b2;          // d x h, 1 x h, h x d, 1 x d

  static LayerParams zeros(Eigen::Index d, Eigen::Index hidden) {
    LayerParams p;
    p.attn = AttentionParams<S>::zeros(d);
    p.ln1_gain = p.ln2_gain = Matrix<S>::Ones(1, d);
    p.ln1_bias = p.ln2_bias = Matrix<S>::Zero(1, d);
    p.ffn_w1 = Matrix<S>::Zero(d, hidden);
    p.ffn_b1 = Matrix<S>::Zero(1, hidden);
    p.ffn_w2 = Matrix<S>::Zero(hidden, d);
    p.ffn_b2 = Matrix<S>::Zero(1, d);
    return p;
  }

  template <typename P, typename F>
  static void each(P& p, F&& f) {
    AttentionParams<S>::each(p.attn, [&](std::string_view name, auto& m) { f(std::string("attn.") + std::string(name), m); });
    f(std::string("ln1_gain"), p.ln1_gain);
    f(std::string("ln1_bias"), p.ln1_bias);
    f(std::string("ln2_gain"), p.ln2_gain);
    f(std::string("ln2_bias"), p.ln2_bias);
    f(std::string("ffn_w1"), p.ffn_w1);
    f(std::string("ffn_b1"), p.ffn_b1);
    f(std::string("ffn_w2"), p.ffn_w2);
    f(std::string("ffn_b2"), p.ffn_b2);
  }
  template <typename F>
  void for_each(F&& f) {
    each(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    each(*this, f);
  }
};

class NonFiniteActivation : public std::runtime_error {
 public:
  NonFiniteActivation(int layer, Eigen::Index row)
      : std::runtime_error("non-finite activation at layer " + std::to_string(layer) + ", position " +
                           std::to_string(row)),
        layer_(layer),
        row_(row) {}
  int layer() const { return layer_; }
  Eigen::Index row() const { return row_; }

 private:
  int layer_;
  Eigen::Index row_;
};

template <typename S>
struct LayerCache {
  FcAttentionCache<S> fc;
  LayerNormCache<S> ln1, ln2;
  FeedForwardCache<S> ffn;
  Eigen::Index ffn_begin = 0;
};

/// One layer. Pre-norm: h + FC(LN1(h)), then + FFN(LN2(.)).
/// Post-norm: LN1(h + FC(h)), then LN2(. + FFN(.)).
template <typename S>
Matrix<S> fc_layer_forward(const Matrix<S>& states, const LayoutBundle& layouts, const LayerParams<S>& p,
                           const LayerOptions& opt, std::type_identity_t<LayerCache<S>>* cache = nullptr, int layer_index = 0) {
  LayerCache<S> local;
  LayerCache<S>& c = cache ? *cache : local;
  const auto bars = static_cast<Eigen::Index>(layouts.summary.rows());
  c.ffn_begin = opt.ffn_on_summaries ? 0 : bars;
  const Eigen::Index ffn_rows = states.rows() - c.ffn_begin;

  Matrix<S> out;
  if (opt.norm == NormPlacement::pre) {
    Matrix<S> h1 = states + fc_attention(layer_norm(states, p.ln1_gain, p.ln1_bias, &c.ln1), layouts, p.attn,
                                         opt.heads, &c.fc);
    Matrix<S> normed = layer_norm(Matrix<S>(h1.bottomRows(ffn_rows)), p.ln2_gain, p.ln2_bias, &c.ln2);
    h1.bottomRows(ffn_rows) += feed_forward(normed, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2, &c.ffn);
    out = std::move(h1);
  } else {
    Matrix<S> h1 =
        layer_norm(Matrix<S>(states + fc_attention(states, layouts, p.attn, opt.heads, &c.fc)), p.ln1_gain, p.ln1_bias, &c.ln1);
    Matrix<S> rows = h1.bottomRows(ffn_rows);
    rows += feed_forward(rows, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2, &c.ffn);
    h1.bottomRows(ffn_rows) = layer_norm(rows, p.ln2_gain, p.ln2_bias, &c.ln2);
    out = std::move(h1);
  }
  if (!out.allFinite()) {
    for (Eigen::Index r = 0; r < out.rows(); ++r)
      if (!out.row(r).allFinite()) throw NonFiniteActivation(layer_index, r);
  }
  return out;
}

template <typename S>
Matrix<S> fc_layer_backward(const LayerCache<S>& c, const LayoutBundle& layouts, const LayerParams<S>& p,
                            const LayerOptions& opt, const Matrix<S>& dout, LayerParams<S>& g) {
  const Eigen::Index ffn_rows = dout.rows() - c.ffn_begin;
  if (opt.norm == NormPlacement::pre) {
    Matrix<S> dh1 = dout;
    Matrix<S> dnormed = feed_forward_backward(c.ffn, p.ffn_w1, p.ffn_w2, Matrix<S>(dout.bottomRows(ffn_rows)),
                                              g.ffn_w1, g.ffn_b1, g.ffn_w2, g.ffn_b2);
    dh1.bottomRows(ffn_rows) += layer_norm_backward(c.ln2, p.ln2_gain, dnormed, g.ln2_gain, g.ln2_bias);
    Matrix<S> dnorm1 = fc_attention_backward(c.fc, layouts, p.attn, opt.heads, dh1, g.attn);
    return dh1 + layer_norm_backward(c.ln1, p.ln1_gain, dnorm1, g.ln1_gain, g.ln1_bias);
  }
  Matrix<S> dh1 = dout;
  Matrix<S> drows = layer_norm_backward(c.ln2, p.ln2_gain, Matrix<S>(dout.bottomRows(ffn_rows)), g.ln2_gain, g.ln2_bias);
  drows += feed_forward_backward(c.ffn, p.ffn_w1, p.ffn_w2, drows, g.ffn_w1, g.ffn_b1, g.ffn_w2, g.ffn_b2);
  dh1.bottomRows(ffn_rows) = drows;
  Matrix<S> du = layer_norm_backward(c.ln1, p.ln1_gain, dh1, g.ln1_gain, g.ln1_bias);
  return du + fc_attention_backward(c.fc, layouts, p.attn, opt.heads, du, g.attn);
}

}  // namespace museformer
