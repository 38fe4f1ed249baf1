#pragma once

// Autoregressive sampling with per-layer key/value caches.
//
// Music tokens are fed one at a time. Each layer keeps the music-type keys
// and values of every token seen so far plus, per closed bar, the
// summary-source key and value of its fresh summary. When a later BAR
// arrives the previous bar is closed: its summary row is run through all
// layers against the cached keys and values of that bar.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "museformer/model.hpp"

namespace museformer {

struct GenerationConfig {
  int top_k = 8;
  // Music tokens (SUM excluded) in the output, prompt included.
  std::size_t max_len = 2048;
  std::size_t min_len = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (top_k < 1) throw std::invalid_argument("top_k must be >= 1");
    if (min_len > max_len) throw std::invalid_argument("min_len exceeds max_len");
  }
};

template <typename S>
class IncrementalDecoder {
 public:
  IncrementalDecoder(const ModelParams<S>& params, const ModelConfig& config)
      : p_(params), c_(config), tracker_(config.positions_per_bar), caches_(params.layers.size()) {
    c_.validate();
  }

  /// Feeds one music token; returns the logits for the next token.
  RowVector<S> step(int id) {
    if (id == Vocabulary::kSum) throw std::invalid_argument("decoder: SUM tokens are implicit");
    auto [bar, beat] = tracker_.next(id);
    if (bar >= c_.max_bars) throw std::out_of_range("decoder: bar id exceeds max_bars");
    while (closed_bars_ < static_cast<std::size_t>(bar)) close_bar();
    if (bar_starts_.size() <= static_cast<std::size_t>(bar)) bar_starts_.push_back(tokens_);

    RowVector<S> h = embed_row(id, bar, beat);
    const auto q_index = tokens_;
    const std::vector<std::size_t> fine = fine_sources(static_cast<std::size_t>(bar));
    const std::vector<std::size_t> coarse = coarse_sources(static_cast<std::size_t>(bar));
    for (std::size_t l = 0; l < p_.layers.size(); ++l) {
      const auto& lp = p_.layers[l];
      auto& cache = caches_[l];
      RowVector<S> a = c_.norm == NormPlacement::pre ? norm_row(h, lp.ln1_gain, lp.ln1_bias) : h;
      RowVector<S> q = a * lp.attn.w_q + lp.attn.b_q.row(kMusicType);
      cache.append(a * lp.attn.w_k + lp.attn.b_k.row(kMusicType), a * lp.attn.w_v + lp.attn.b_v.row(kMusicType));
      std::vector<const S*> keys, values;
      for (std::size_t j : fine) {
        keys.push_back(cache.key(j));
        values.push_back(cache.value(j));
      }
      for (std::size_t j = bar_starts_[static_cast<std::size_t>(bar)]; j <= q_index; ++j) {
        keys.push_back(cache.key(j));
        values.push_back(cache.value(j));
      }
      for (std::size_t b : coarse) {
        keys.push_back(cache.sum_k[b].data());
        values.push_back(cache.sum_v[b].data());
      }
      RowVector<S> out = attend_row(q, keys, values) * lp.attn.w_o + lp.attn.b_o;
      h = residual_ffn(h, out, lp);
    }
    ++tokens_;
    RowVector<S> hidden = c_.norm == NormPlacement::pre ? norm_row(h, p_.final_gain, p_.final_bias) : h;
    return hidden * p_.out_w + p_.out_b;
  }

  std::size_t tokens() const { return tokens_; }
  std::size_t closed_bars() const { return closed_bars_; }

 private:
  struct LayerKV {
    Matrix<S> k, v;
    std::size_t used = 0;
    std::vector<RowVector<S>> sum_k, sum_v;

    void append(const RowVector<S>& key, const RowVector<S>& value) {
      if (used == static_cast<std::size_t>(k.rows())) {
        const Eigen::Index cap = std::max<Eigen::Index>(64, 2 * k.rows());
        k.conservativeResize(cap, key.cols());
        v.conservativeResize(cap, value.cols());
      }
      k.row(static_cast<Eigen::Index>(used)) = key;
      v.row(static_cast<Eigen::Index>(used)) = value;
      ++used;
    }
    const S* key(std::size_t j) const { return k.data() + static_cast<Eigen::Index>(j) * k.cols(); }
    const S* value(std::size_t j) const { return v.data() + static_cast<Eigen::Index>(j) * v.cols(); }
  };

  RowVector<S> embed_row(int id, int bar, int beat) const {
    const Eigen::Index dt = c_.tok_width(), db = c_.bar_width(), dbeat = c_.beat_width();
    RowVector<S> concat(dt + db + dbeat);
    concat.head(dt) = p_.tok_emb.row(id);
    concat.segment(dt, db) = p_.bar_emb.row(bar);
    concat.tail(dbeat) = p_.beat_emb.row(beat);
    return concat * p_.comb_w + p_.comb_b;
  }

  static RowVector<S> norm_row(const RowVector<S>& x, const Matrix<S>& gain, const Matrix<S>& bias) {
    return layer_norm(Matrix<S>(x), gain, bias, nullptr).row(0);
  }

  RowVector<S> attend_row(const RowVector<S>& q, const std::vector<const S*>& keys,
                          const std::vector<const S*>& values) const {
    const Eigen::Index d = q.cols(), dh = d / c_.n_heads;
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    RowVector<S> ctx = RowVector<S>::Zero(d);
    std::vector<S> w(keys.size());
    for (int h = 0; h < c_.n_heads; ++h) {
      const Eigen::Index off = h * dh;
      S max_score = -std::numeric_limits<S>::infinity();
      for (std::size_t i = 0; i < keys.size(); ++i) {
        w[i] = scale * detail::dot(q.data() + off, keys[i] + off, dh);
        max_score = std::max(max_score, w[i]);
      }
      S total = 0;
      for (auto& x : w) total += (x = std::exp(x - max_score));
      for (std::size_t i = 0; i < keys.size(); ++i) detail::axpy(w[i] / total, values[i] + off, ctx.data() + off, dh);
    }
    return ctx;
  }

  RowVector<S> residual_ffn(const RowVector<S>& h, const RowVector<S>& attn_out, const LayerParams<S>& lp) const {
    auto ffn = [&](const RowVector<S>& x) -> RowVector<S> {
      RowVector<S> hidden = (x * lp.ffn_w1 + lp.ffn_b1).cwiseMax(S(0));
      return hidden * lp.ffn_w2 + lp.ffn_b2;
    };
    if (c_.norm == NormPlacement::pre) {
      RowVector<S> h1 = h + attn_out;
      return h1 + ffn(norm_row(h1, lp.ln2_gain, lp.ln2_bias));
    }
    RowVector<S> h1 = norm_row(h + attn_out, lp.ln1_gain, lp.ln1_bias);
    return norm_row(h1 + ffn(h1), lp.ln2_gain, lp.ln2_bias);
  }

  std::vector<std::size_t> fine_sources(std::size_t bar) const {
    std::vector<std::size_t> out;
    for (int o : c_.selection.offsets()) {
      if (static_cast<std::size_t>(o) > bar) break;
      const std::size_t related = bar - static_cast<std::size_t>(o);
      for (std::size_t j = bar_starts_[related]; j < bar_starts_[related + 1]; ++j) out.push_back(j);
    }
    // Summary-first ordering lists sources by index; match it.
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<std::size_t> coarse_sources(std::size_t bar) const {
    std::vector<std::size_t> out;
    if (!c_.coarse) return out;
    for (std::size_t prev = 0; prev < bar; ++prev) {
      if (!c_.include_related_summaries && c_.selection.contains(static_cast<int>(bar - prev))) continue;
      out.push_back(prev);
    }
    return out;
  }

  void close_bar() {
    const std::size_t bar = closed_bars_;
    const std::size_t begin = bar_starts_.at(bar);
    const std::size_t end = bar + 1 < bar_starts_.size() ? bar_starts_[bar + 1] : tokens_;
    if (bar + 1 >= bar_starts_.size()) bar_starts_.push_back(end);
    RowVector<S> h = embed_row(Vocabulary::kSum, static_cast<int>(bar), c_.positions_per_bar);
    for (std::size_t l = 0; l < p_.layers.size(); ++l) {
      const auto& lp = p_.layers[l];
      auto& cache = caches_[l];
      RowVector<S> a = c_.norm == NormPlacement::pre ? norm_row(h, lp.ln1_gain, lp.ln1_bias) : h;
      RowVector<S> q = a * lp.attn.w_q + lp.attn.b_q.row(kSummaryType);
      RowVector<S> k_self = a * lp.attn.w_k + lp.attn.b_k.row(kSummaryType);
      RowVector<S> v_self = a * lp.attn.w_v + lp.attn.b_v.row(kSummaryType);
      std::vector<const S*> keys{k_self.data()}, values{v_self.data()};
      for (std::size_t j = begin; j < end; ++j) {
        keys.push_back(cache.key(j));
        values.push_back(cache.value(j));
      }
      RowVector<S> fresh = attend_row(q, keys, values) * lp.attn.w_o + lp.attn.b_o;
      cache.sum_k.push_back(fresh * lp.attn.w_k_sum + lp.attn.b_k_sum);
      cache.sum_v.push_back(fresh * lp.attn.w_v_sum + lp.attn.b_v_sum);
      if (c_.ffn_on_summaries) {
        h = residual_ffn(h, fresh, lp);
      } else {
        h = c_.norm == NormPlacement::pre ? RowVector<S>(h + fresh) : norm_row(h + fresh, lp.ln1_gain, lp.ln1_bias);
      }
    }
    ++closed_bars_;
  }

  const ModelParams<S>& p_;
  ModelConfig c_;
  PositionTracker tracker_;
  std::vector<LayerKV> caches_;
  std::vector<std::size_t> bar_starts_;  // first token index of each bar
  std::size_t tokens_ = 0;
  std::size_t closed_bars_ = 0;
};

/// Samples from the top `k` entries of softmax(logits) after zeroing
/// `banned` ids. Ties in probability keep the lower id first.
template <typename S>
int sample_top_k(const RowVector<S>& logits, int k, std::mt19937_64& rng, const std::vector<int>& banned = {}) {
  const auto V = static_cast<std::size_t>(logits.cols());
  std::vector<double> prob(V);
  const double m = static_cast<double>(logits.maxCoeff());
  for (std::size_t i = 0; i < V; ++i) prob[i] = std::exp(static_cast<double>(logits(static_cast<Eigen::Index>(i))) - m);
  for (int b : banned) prob[static_cast<std::size_t>(b)] = 0.0;
  std::vector<int> order(V);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return prob[static_cast<std::size_t>(a)] > prob[static_cast<std::size_t>(b)]; });
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k), V);
  double total = 0;
  for (std::size_t i = 0; i < keep; ++i) total += prob[static_cast<std::size_t>(order[i])];
  if (total <= 0.0) throw std::runtime_error("sampler: no token has positive probability");
  if (keep == 1) return order[0];
  const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
  double acc = 0;
  for (std::size_t i = 0; i < keep; ++i) {
    acc += prob[static_cast<std::size_t>(order[i])];
    if (u < acc) return order[i];
  }
  return order[keep - 1];
}

/// Continues `prompt` until EOS or `max_len` music tokens. A SUM is written
/// after every closed bar, so the result parses with make_token_seq.
template <typename S>
TokenSeq generate(const ModelParams<S>& p, const ModelConfig& c, const TokenSeq& prompt,
                  const GenerationConfig& g = {}) {
  g.validate();
  std::vector<int> music;
  for (int id : prompt.ids)
    if (id != Vocabulary::kSum) music.push_back(id);
  if (music.empty()) music.push_back(Vocabulary::kBos);
  if (music.size() >= g.max_len || music.back() == Vocabulary::kEos) return prompt;

  IncrementalDecoder<S> decoder(p, c);
  PositionTracker tracker(c.positions_per_bar);
  std::vector<int> out;
  bool bar_open = false;
  auto emit = [&](int id) {
    if (id == Vocabulary::kBar && bar_open) out.push_back(Vocabulary::kSum);
    if (id == Vocabulary::kEos && bar_open) out.push_back(Vocabulary::kSum);
    if (id == Vocabulary::kBar) bar_open = true;
    out.push_back(id);
    tracker.next(id);
  };

  RowVector<S> logits;
  for (int id : music) {
    emit(id);
    logits = decoder.step(id);
  }
  std::mt19937_64 rng(g.seed);
  std::size_t count = music.size();
  while (count < g.max_len) {
    std::vector<int> banned{Vocabulary::kSum, Vocabulary::kBos};
    if (count + 1 < g.min_len) banned.push_back(Vocabulary::kEos);
    // A new bar past the embedding table ends the piece instead.
    const bool bar_full = tracker.bars_started() >= c.max_bars;
    if (bar_full) banned.push_back(Vocabulary::kBar);
    const int next = sample_top_k(logits, g.top_k, rng, banned);
    emit(next);
    ++count;
    if (next == Vocabulary::kEos) break;
    logits = decoder.step(next);
  }
  return make_token_seq(std::move(out));
}

}  // namespace museformer
