#pragma once

// The full language model: token, bar and beat embeddings concatenated and
// projected to the model width, a stack of FC-Attention layers, and a
// softmax head over music positions.

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "museformer/fc_attention.hpp"
#include "museformer/layout.hpp"
#include "museformer/tokenizer.hpp"

namespace museformer {

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int ffn_hidden = 128;
  int vocab_size = Vocabulary::size();
  int max_bars = 256;
  int positions_per_bar = Vocabulary::kPositionsPerBar;
  // Zero selects the default split: d_tok = d_model, d_bar = d_beat = d_model / 4.
  int d_tok = 0;
  int d_bar = 0;
  int d_beat = 0;
  BarSelection selection = BarSelection::paper_default();
  int block_size = 32;
  NormPlacement norm = NormPlacement::pre;
  bool coarse = true;
  bool include_related_summaries = false;
  bool ffn_on_summaries = true;

  int tok_width() const { return d_tok > 0 ? d_tok : d_model; }
  int bar_width() const { return d_bar > 0 ? d_bar : std::max(1, d_model / 4); }
  int beat_width() const { return d_beat > 0 ? d_beat : std::max(1, d_model / 4); }
  int concat_width() const { return tok_width() + bar_width() + beat_width(); }

  LayerOptions layer_options() const { return {norm, ffn_on_summaries, n_heads}; }

  LayoutSpec layout_spec(std::vector<int> bar_lengths) const {
    LayoutSpec s;
    s.bar_lengths = std::move(bar_lengths);
    s.selection = selection;
    s.coarse = coarse;
    s.include_related_summaries = include_related_summaries;
    return s;
  }

  void validate() const {
    for (int v : {n_layers, d_model, n_heads, ffn_hidden, vocab_size, max_bars, positions_per_bar, block_size})
      if (v <= 0) throw std::invalid_argument("model config: sizes must be positive");
    if (d_model % n_heads != 0) throw std::invalid_argument("model config: d_model must be divisible by n_heads");
    if (d_tok < 0 || d_bar < 0 || d_beat < 0) throw std::invalid_argument("model config: negative embedding width");
    if (vocab_size != Vocabulary::size()) throw std::invalid_argument("model config: vocab_size differs from the vocabulary");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers},
       {"d_model", c.d_model},
       {"n_heads", c.n_heads},
       {"ffn_hidden", c.ffn_hidden},
       {"vocab_size", c.vocab_size},
       {"max_bars", c.max_bars},
       {"positions_per_bar", c.positions_per_bar},
       {"d_tok", c.d_tok},
       {"d_bar", c.d_bar},
       {"d_beat", c.d_beat},
       {"selection", c.selection.str()},
       {"block_size", c.block_size},
       {"norm", c.norm == NormPlacement::pre ? "pre" : "post"},
       {"coarse", c.coarse},
       {"include_related_summaries", c.include_related_summaries},
       {"ffn_on_summaries", c.ffn_on_summaries}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.ffn_hidden = j.value("ffn_hidden", d.ffn_hidden);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_bars = j.value("max_bars", d.max_bars);
  c.positions_per_bar = j.value("positions_per_bar", d.positions_per_bar);
  c.d_tok = j.value("d_tok", d.d_tok);
  c.d_bar = j.value("d_bar", d.d_bar);
  c.d_beat = j.value("d_beat", d.d_beat);
  c.selection = BarSelection::parse(j.value("selection", d.selection.str()));
  c.block_size = j.value("block_size", d.block_size);
  const std::string norm = j.value("norm", std::string("pre"));
  if (norm != "pre" && norm != "post") throw std::invalid_argument("model config: norm must be pre or post");
  c.norm = norm == "pre" ? NormPlacement::pre : NormPlacement::post;
  c.coarse = j.value("coarse", d.coarse);
  c.include_related_summaries = j.value("include_related_summaries", d.include_related_summaries);
  c.ffn_on_summaries = j.value("ffn_on_summaries", d.ffn_on_summaries);
}

// ---------------------------------------------------------------------------
// Parameters

template <typename S>
struct ModelParams {
  Matrix<S> tok_emb, bar_emb, beat_emb;  // vocab x d_tok, max_bars x d_bar, (positions + 1) x d_beat
  Matrix<S> comb_w, comb_b;              // concat x d, 1 x d
  std::vector<LayerParams<S>> layers;
  Matrix<S> final_gain, final_bias;      // 1 x d, pre-norm only
  Matrix<S> out_w, out_b;                // d x vocab, 1 x vocab

  static ModelParams zeros(const ModelConfig& c) {
    c.validate();
    ModelParams p;
    p.tok_emb = Matrix<S>::Zero(c.vocab_size, c.tok_width());
    p.bar_emb = Matrix<S>::Zero(c.max_bars, c.bar_width());
    p.beat_emb = Matrix<S>::Zero(c.positions_per_bar + 1, c.beat_width());
    p.comb_w = Matrix<S>::Zero(c.concat_width(), c.d_model);
    p.comb_b = Matrix<S>::Zero(1, c.d_model);
    for (int l = 0; l < c.n_layers; ++l) p.layers.push_back(LayerParams<S>::zeros(c.d_model, c.ffn_hidden));
    p.final_gain = Matrix<S>::Ones(1, c.d_model);
    p.final_bias = Matrix<S>::Zero(1, c.d_model);
    p.out_w = Matrix<S>::Zero(c.d_model, c.vocab_size);
    p.out_b = Matrix<S>::Zero(1, c.vocab_size);
    return p;
  }

  /// Visits every tensor with a stable dotted name, in checkpoint order.
  template <typename P, typename F>
  static void each(P& p, F&& f) {
    f(std::string("tok_emb"), p.tok_emb);
    f(std::string("bar_emb"), p.bar_emb);
    f(std::string("beat_emb"), p.beat_emb);
    f(std::string("comb_w"), p.comb_w);
    f(std::string("comb_b"), p.comb_b);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      const std::string prefix = "layers." + std::to_string(l) + ".";
      LayerParams<S>::each(p.layers[l], [&](const std::string& name, auto& m) { f(prefix + name, m); });
    }
    f(std::string("final_gain"), p.final_gain);
    f(std::string("final_bias"), p.final_bias);
    f(std::string("out_w"), p.out_w);
    f(std::string("out_b"), p.out_b);
  }
  template <typename F>
  void for_each(F&& f) {
    each(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    each(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Matrix<S>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  template <typename T>
  ModelParams<T> cast() const {
    ModelParams<T> out;
    out.layers.resize(layers.size());
    std::vector<const Matrix<S>*> src;
    for_each([&](const std::string&, const Matrix<S>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.for_each([&](const std::string&, Matrix<T>& m) { m = src[i++]->template cast<T>(); });
    return out;
  }
};

/// Gaussian init: weights with std 1/sqrt(fan_in), embeddings with std 1,
/// output head with std 0.02, biases zero, norm gains one.
template <typename S>
ModelParams<S> init_params(const ModelConfig& c, std::uint64_t seed) {
  ModelParams<S> p = ModelParams<S>::zeros(c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Matrix<S>& m, double scale) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(scale * normal(rng));
  };
  auto fan_in = [](const Matrix<S>& m) { return 1.0 / std::sqrt(static_cast<double>(m.rows())); };
  fill(p.tok_emb, 1.0);
  fill(p.bar_emb, 1.0);
  fill(p.beat_emb, 1.0);
  fill(p.comb_w, fan_in(p.comb_w));
  for (auto& layer : p.layers) {
    auto& a = layer.attn;
    for (Matrix<S>* m : {&a.w_q, &a.w_k, &a.w_v, &a.w_k_sum, &a.w_v_sum, &a.w_o, &layer.ffn_w1, &layer.ffn_w2})
      fill(*m, fan_in(*m));
  }
  fill(p.out_w, 0.02);
  return p;
}

// ---------------------------------------------------------------------------
// Sequences as the model sees them

/// Inputs are the music tokens of a song (SUM removed) without the final
/// token; targets are the same list shifted by one. Bar and beat ids come
/// from the PositionTracker, so BOS and the first BAR share bar 0.
struct ModelSequence {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<int> bar_ids;
  std::vector<int> beat_ids;
  std::vector<int> bar_lengths;
  bool truncated = false;

  std::size_t size() const { return inputs.size(); }

  /// The first `length` inputs with their targets.
  ModelSequence prefix(std::size_t length) const {
    if (length >= inputs.size()) return *this;
    ModelSequence s;
    s.inputs.assign(inputs.begin(), inputs.begin() + static_cast<std::ptrdiff_t>(length));
    s.targets.assign(targets.begin(), targets.begin() + static_cast<std::ptrdiff_t>(length));
    s.bar_ids.assign(bar_ids.begin(), bar_ids.begin() + static_cast<std::ptrdiff_t>(length));
    s.beat_ids.assign(beat_ids.begin(), beat_ids.begin() + static_cast<std::ptrdiff_t>(length));
    s.bar_lengths.assign(static_cast<std::size_t>(s.bar_ids.empty() ? 0 : s.bar_ids.back() + 1), 0);
    for (int b : s.bar_ids) ++s.bar_lengths[static_cast<std::size_t>(b)];
    s.truncated = true;
    return s;
  }
};

/// Drops music tokens from bar `max_bars` on and, if `max_tokens` > 0,
/// everything past the first `max_tokens` inputs. Either cut sets `truncated`.
inline ModelSequence to_model_sequence(const TokenSeq& seq, int max_bars, std::size_t max_tokens = 0,
                                       int positions_per_bar = Vocabulary::kPositionsPerBar) {
  std::vector<int> ids, bars, beats;
  PositionTracker tracker(positions_per_bar);
  for (int id : seq.ids) {
    auto [bar, beat] = tracker.next(id);
    if (id == Vocabulary::kSum) continue;
    ids.push_back(id);
    bars.push_back(bar);
    beats.push_back(beat);
  }
  if (ids.size() < 2) throw std::invalid_argument("sequence needs at least two tokens");
  ModelSequence s;
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
    if (bars[i] >= max_bars) {
      s.truncated = true;
      break;
    }
    s.inputs.push_back(ids[i]);
    s.targets.push_back(ids[i + 1]);
    s.bar_ids.push_back(bars[i]);
    s.beat_ids.push_back(beats[i]);
  }
  s.bar_lengths.assign(static_cast<std::size_t>(s.bar_ids.back() + 1), 0);
  for (int b : s.bar_ids) ++s.bar_lengths[static_cast<std::size_t>(b)];
  if (max_tokens > 0 && s.size() > max_tokens) s = s.prefix(max_tokens);
  return s;
}

// ---------------------------------------------------------------------------
// Forward and backward

template <typename S>
struct ModelCache {
  std::shared_ptr<const LayoutBundle> layouts;
  std::vector<int> row_tok, row_bar, row_beat;
  Matrix<S> concat;
  std::vector<LayerCache<S>> layers;
  LayerNormCache<S> final_ln;
  Matrix<S> hidden;  // music rows fed to the output head
};

namespace detail {

inline std::shared_ptr<const LayoutBundle> layouts_for(const ModelConfig& c, const ModelSequence& seq,
                                                       LayoutCache* cache) {
  LayoutSpec spec = c.layout_spec(seq.bar_lengths);
  if (cache) return cache->get(spec);
  return std::make_shared<const LayoutBundle>(LayoutBundle::build(std::move(spec)));
}

}  // namespace detail

/// Rows of the model input in summary-first order: one SUM row per bar, then
/// the music tokens.
template <typename S>
Matrix<S> embed(const ModelParams<S>& p, const ModelConfig& c, const ModelSequence& seq, std::type_identity_t<ModelCache<S>>* cache) {
  const std::size_t bars = seq.bar_lengths.size();
  const std::size_t rows = bars + seq.size();
  std::vector<int> tok(rows), bar(rows), beat(rows);
  for (std::size_t i = 0; i < bars; ++i) {
    tok[i] = Vocabulary::kSum;
    bar[i] = static_cast<int>(i);
    beat[i] = c.positions_per_bar;
  }
  for (std::size_t j = 0; j < seq.size(); ++j) {
    tok[bars + j] = seq.inputs[j];
    bar[bars + j] = seq.bar_ids[j];
    beat[bars + j] = seq.beat_ids[j];
  }
  const Eigen::Index dt = c.tok_width(), db = c.bar_width(), dbeat = c.beat_width();
  Matrix<S> concat(static_cast<Eigen::Index>(rows), dt + db + dbeat);
  for (std::size_t r = 0; r < rows; ++r) {
    if (bar[r] < 0 || bar[r] >= c.max_bars) throw std::out_of_range("bar id exceeds max_bars");
    if (tok[r] < 0 || tok[r] >= c.vocab_size) throw std::out_of_range("token id outside the vocabulary");
    if (beat[r] < 0 || beat[r] > c.positions_per_bar) throw std::out_of_range("beat id out of range");
    const auto row = static_cast<Eigen::Index>(r);
    concat.row(row).head(dt) = p.tok_emb.row(tok[r]);
    concat.row(row).segment(dt, db) = p.bar_emb.row(bar[r]);
    concat.row(row).tail(dbeat) = p.beat_emb.row(beat[r]);
  }
  Matrix<S> states = affine(concat, p.comb_w, p.comb_b);
  if (cache) {
    cache->row_tok = std::move(tok);
    cache->row_bar = std::move(bar);
    cache->row_beat = std::move(beat);
    cache->concat = std::move(concat);
  }
  return states;
}

/// Logits (music tokens x vocab). Summary positions produce none.
template <typename S>
Matrix<S> forward(const ModelParams<S>& p, const ModelConfig& c, const ModelSequence& seq,
                  std::type_identity_t<ModelCache<S>>* cache = nullptr, LayoutCache* layout_cache = nullptr) {
  ModelCache<S> local;
  ModelCache<S>& mc = cache ? *cache : local;
  mc.layouts = detail::layouts_for(c, seq, layout_cache);
  Matrix<S> h = embed(p, c, seq, &mc);
  mc.layers.resize(p.layers.size());
  const LayerOptions opt = c.layer_options();
  for (std::size_t l = 0; l < p.layers.size(); ++l)
    h = fc_layer_forward(h, *mc.layouts, p.layers[l], opt, &mc.layers[l], static_cast<int>(l));
  const auto n = static_cast<Eigen::Index>(seq.size());
  Matrix<S> music = h.bottomRows(n);
  mc.hidden = c.norm == NormPlacement::pre ? layer_norm(music, p.final_gain, p.final_bias, &mc.final_ln) : music;
  return affine(mc.hidden, p.out_w, p.out_b);
}

template <typename S>
void backward(const ModelParams<S>& p, const ModelConfig& c, const ModelCache<S>& mc, const Matrix<S>& dlogits,
              ModelParams<S>& g) {
  Matrix<S> dhidden = affine_backward(mc.hidden, p.out_w, dlogits, g.out_w, g.out_b);
  if (c.norm == NormPlacement::pre)
    dhidden = layer_norm_backward(mc.final_ln, p.final_gain, dhidden, g.final_gain, g.final_bias);
  const auto bars = static_cast<Eigen::Index>(mc.layouts->spec.bar_count());
  Matrix<S> dh = Matrix<S>::Zero(bars + dhidden.rows(), c.d_model);
  dh.bottomRows(dhidden.rows()) = dhidden;
  const LayerOptions opt = c.layer_options();
  for (std::size_t l = p.layers.size(); l-- > 0;)
    dh = fc_layer_backward(mc.layers[l], *mc.layouts, p.layers[l], opt, dh, g.layers[l]);
  Matrix<S> dconcat = affine_backward(mc.concat, p.comb_w, dh, g.comb_w, g.comb_b);
  const Eigen::Index dt = c.tok_width(), db = c.bar_width(), dbeat = c.beat_width();
  for (Eigen::Index r = 0; r < dconcat.rows(); ++r) {
    const auto i = static_cast<std::size_t>(r);
    g.tok_emb.row(mc.row_tok[i]) += dconcat.row(r).head(dt);
    g.bar_emb.row(mc.row_bar[i]) += dconcat.row(r).segment(dt, db);
    g.beat_emb.row(mc.row_beat[i]) += dconcat.row(r).tail(dbeat);
  }
}

/// Mean negative log-likelihood in nats. If `dlogits` is given it receives
/// d(mean nll)/d(logits) scaled by `grad_scale`.
template <typename S>
double nll_loss(const Matrix<S>& logits, std::span<const int> targets, Matrix<S>* dlogits = nullptr,
                S grad_scale = S(1)) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size())
    throw std::invalid_argument("nll_loss: logits rows != target count");
  if (targets.empty()) throw std::invalid_argument("nll_loss: no targets");
  if (dlogits) dlogits->resize(logits.rows(), logits.cols());
  double total = 0;
  const S inv_n = grad_scale / static_cast<S>(targets.size());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= logits.cols()) throw std::out_of_range("nll_loss: target outside the vocabulary");
    const S m = logits.row(r).maxCoeff();
    const S z = (logits.row(r).array() - m).exp().sum();
    const S log_z = m + std::log(z);
    total += static_cast<double>(log_z - logits(r, t));
    if (dlogits) {
      dlogits->row(r) = ((logits.row(r).array() - log_z).exp() * inv_n).matrix();
      (*dlogits)(r, t) -= inv_n;
    }
  }
  return total / static_cast<double>(targets.size());
}

/// Sum of per-position nll over the first `limit` positions (all if 0).
template <typename S>
double nll_sum(const Matrix<S>& logits, std::span<const int> targets, std::size_t limit = 0) {
  const std::size_t n = limit ? std::min(limit, targets.size()) : targets.size();
  double total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = static_cast<Eigen::Index>(r);
    const S m = logits.row(row).maxCoeff();
    const S log_z = m + std::log((logits.row(row).array() - m).exp().sum());
    total += static_cast<double>(log_z - logits(row, targets[r]));
  }
  return total;
}

/// Mean nll of one sequence; accumulates its gradient times `grad_scale`.
template <typename S>
double loss_and_gradient(const ModelParams<S>& p, const ModelConfig& c, const ModelSequence& seq, ModelParams<S>& g,
                         S grad_scale = S(1), LayoutCache* layout_cache = nullptr) {
  ModelCache<S> cache;
  Matrix<S> logits = forward(p, c, seq, &cache, layout_cache);
  Matrix<S> dlogits;
  const double loss = nll_loss(logits, std::span<const int>(seq.targets), &dlogits, grad_scale);
  backward(p, c, cache, dlogits, g);
  return loss;
}

/// exp(mean nll) over the first L predictions of every sample, pooled over
/// tokens; one value per prefix length.
template <typename S>
std::vector<double> perplexity_at_prefix(const ModelParams<S>& p, const ModelConfig& c,
                                         std::span<const ModelSequence> corpus, std::span<const std::size_t> lengths,
                                         LayoutCache* layout_cache = nullptr) {
  if (corpus.empty()) throw std::invalid_argument("perplexity: empty corpus");
  std::vector<double> out;
  for (std::size_t L : lengths) {
    if (L == 0) throw std::invalid_argument("perplexity: prefix lengths must be positive");
    double total = 0;
    std::size_t count = 0;
    for (const auto& seq : corpus) {
      ModelSequence cut = seq.prefix(L);
      Matrix<S> logits = forward(p, c, cut, nullptr, layout_cache);
      total += nll_sum(logits, std::span<const int>(cut.targets));
      count += cut.size();
    }
    out.push_back(std::exp(total / static_cast<double>(count)));
  }
  return out;
}

/// Mean nll over whole sequences, pooled over tokens.
template <typename S>
double mean_nll(const ModelParams<S>& p, const ModelConfig& c, std::span<const ModelSequence> corpus,
                LayoutCache* layout_cache = nullptr) {
  if (corpus.empty()) throw std::invalid_argument("mean_nll: empty corpus");
  double total = 0;
  std::size_t count = 0;
  for (const auto& seq : corpus) {
    total += nll_sum(forward(p, c, seq, nullptr, layout_cache), std::span<const int>(seq.targets));
    count += seq.size();
  }
  return total / static_cast<double>(count);
}

}  // namespace museformer
