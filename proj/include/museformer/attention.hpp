#pragma once

// Multi-head scaled dot-product attention restricted to a layout.
//
// Three kernels compute the same function:
//   masked_attention      - iterates each query's allowed sources (training path)
//   blocksparse_attention - scores whole kept tiles, masking with an additive -1e9
//   dense_masked_attention - scores every pair, masking with an additive -1e9
// Only the first one has a backward pass.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "museformer/layout.hpp"
#include "museformer/tensor.hpp"

namespace museformer {

inline constexpr double kMaskedLogit = -1e9;

class EmptyAttentionRow : public std::logic_error {
 public:
  explicit EmptyAttentionRow(std::size_t row)
      : std::logic_error("attention row " + std::to_string(row) + " has no allowed source"), row_(row) {}
  std::size_t row() const { return row_; }

 private:
  std::size_t row_;
};

namespace detail {

inline void check_heads(Eigen::Index d, int heads) {
  if (heads < 1 || d % heads != 0) throw std::invalid_argument("model width must be divisible by head count");
}

template <typename S>
S dot(const S* a, const S* b, Eigen::Index n) {
  S acc = 0;
  for (Eigen::Index i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename S>
void axpy(S alpha, const S* x, S* y, Eigen::Index n) {
  for (Eigen::Index i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace detail

/// Softmax weights of the last forward, laid out [head][nnz] over the
/// layout's source lists.
template <typename S>
struct AttentionWeights {
  std::vector<S> probs;
};

/// Q: queries x d; K, V: sources x d. Row q of the result mixes the value
/// rows listed for q in `rows`, with softmax(q . k / sqrt(d_head)) weights.
template <typename S>
Matrix<S> masked_attention(const Matrix<S>& Q, const Matrix<S>& K, const Matrix<S>& V, const SourceLists& rows,
                           int heads, std::type_identity_t<AttentionWeights<S>>* weights = nullptr) {
  const Eigen::Index d = Q.cols();
  detail::check_heads(d, heads);
  if (static_cast<std::size_t>(Q.rows()) != rows.rows()) throw std::invalid_argument("query count != layout rows");
  const Eigen::Index dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  Matrix<S> ctx = Matrix<S>::Zero(Q.rows(), d);
  if (weights) weights->probs.assign(static_cast<std::size_t>(heads) * rows.nnz(), S(0));
  std::vector<S> p;
  for (std::size_t q = 0; q < rows.rows(); ++q) {
    const std::uint32_t begin = rows.offsets[q], end = rows.offsets[q + 1];
    if (begin == end) throw EmptyAttentionRow(q);
    p.resize(end - begin);
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index off = h * dh;
      const S* qrow = Q.data() + static_cast<Eigen::Index>(q) * d + off;
      S max_score = -std::numeric_limits<S>::infinity();
      for (std::uint32_t k = begin; k < end; ++k) {
        p[k - begin] = scale * detail::dot(qrow, K.data() + static_cast<Eigen::Index>(rows.sources[k]) * d + off, dh);
        max_score = std::max(max_score, p[k - begin]);
      }
      S total = 0;
      for (auto& v : p) total += (v = std::exp(v - max_score));
      S* out = ctx.data() + static_cast<Eigen::Index>(q) * d + off;
      for (std::uint32_t k = begin; k < end; ++k) {
        const S w = p[k - begin] / total;
        detail::axpy(w, V.data() + static_cast<Eigen::Index>(rows.sources[k]) * d + off, out, dh);
        if (weights) weights->probs[static_cast<std::size_t>(h) * rows.nnz() + k] = w;
      }
    }
  }
  return ctx;
}

/// Accumulates into dQ, dK, dV given the upstream gradient of the context.
template <typename S>
void masked_attention_backward(const Matrix<S>& Q, const Matrix<S>& K, const Matrix<S>& V, const SourceLists& rows,
                               int heads, const AttentionWeights<S>& weights, const Matrix<S>& dctx, Matrix<S>& dQ,
                               Matrix<S>& dK, Matrix<S>& dV) {
  const Eigen::Index d = Q.cols();
  const Eigen::Index dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  std::vector<S> dp;
  for (std::size_t q = 0; q < rows.rows(); ++q) {
    const std::uint32_t begin = rows.offsets[q], end = rows.offsets[q + 1];
    dp.resize(end - begin);
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index off = h * dh;
      const S* probs = weights.probs.data() + static_cast<std::size_t>(h) * rows.nnz();
      const S* g = dctx.data() + static_cast<Eigen::Index>(q) * d + off;
      const S* qrow = Q.data() + static_cast<Eigen::Index>(q) * d + off;
      S* dq = dQ.data() + static_cast<Eigen::Index>(q) * d + off;
      S weighted = 0;
      for (std::uint32_t k = begin; k < end; ++k) {
        const Eigen::Index src = static_cast<Eigen::Index>(rows.sources[k]) * d + off;
        dp[k - begin] = detail::dot(g, V.data() + src, dh);
        weighted += probs[k] * dp[k - begin];
        detail::axpy(probs[k], g, dV.data() + src, dh);
      }
      for (std::uint32_t k = begin; k < end; ++k) {
        const Eigen::Index src = static_cast<Eigen::Index>(rows.sources[k]) * d + off;
        const S ds = scale * probs[k] * (dp[k - begin] - weighted);
        detail::axpy(ds, K.data() + src, dq, dh);
        detail::axpy(ds, qrow, dK.data() + src, dh);
      }
    }
  }
}

/// Full score matrix with disallowed logits shifted by -1e9 before softmax.
template <typename S>
Matrix<S> dense_masked_attention(const Matrix<S>& Q, const Matrix<S>& K, const Matrix<S>& V, const BoolLayout& layout,
                                 int heads) {
  const Eigen::Index d = Q.cols();
  detail::check_heads(d, heads);
  const Eigen::Index dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  Matrix<S> ctx(Q.rows(), d);
  Matrix<S> mask = Matrix<S>::Constant(Q.rows(), K.rows(), S(kMaskedLogit));
  for (std::size_t r = 0; r < layout.rows(); ++r) {
    if (layout.row_count(r) == 0) throw EmptyAttentionRow(r);
    layout.for_each_in_row(r, [&](std::size_t c) { mask(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = 0; });
  }
  for (int h = 0; h < heads; ++h) {
    const Eigen::Index off = h * dh;
    Matrix<S> scores = (Q.middleCols(off, dh) * K.middleCols(off, dh).transpose()) * scale + mask;
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
      const S m = scores.row(r).maxCoeff();
      scores.row(r) = (scores.row(r).array() - m).exp();
      scores.row(r) /= scores.row(r).sum();
    }
    ctx.middleCols(off, dh) = scores * V.middleCols(off, dh);
  }
  return ctx;
}

/// Scores only the kept tiles of `blocks`; cells inside a kept tile that the
/// layout disallows get an additive -1e9.
template <typename S>
Matrix<S> blocksparse_attention(const Matrix<S>& Q, const Matrix<S>& K, const Matrix<S>& V, const BoolLayout& layout,
                                const BlockLayout& blocks, int heads) {
  const Eigen::Index d = Q.cols();
  detail::check_heads(d, heads);
  const Eigen::Index dh = d / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const std::size_t bs = blocks.block_size;
  Matrix<S> ctx = Matrix<S>::Zero(Q.rows(), d);

  std::size_t next = 0;
  std::vector<std::size_t> cols;
  std::vector<S> p;
  for (std::size_t br = 0; br < blocks.block_rows(); ++br) {
    cols.clear();
    while (next < blocks.kept_blocks.size() && blocks.kept_blocks[next].first == br) {
      const std::size_t bc = blocks.kept_blocks[next++].second;
      for (std::size_t c = bc * bs; c < std::min(layout.cols(), (bc + 1) * bs); ++c) cols.push_back(c);
    }
    const std::size_t row_end = std::min(layout.rows(), (br + 1) * bs);
    for (std::size_t q = br * bs; q < row_end; ++q) {
      if (cols.empty()) throw EmptyAttentionRow(q);
      p.resize(cols.size());
      for (int h = 0; h < heads; ++h) {
        const Eigen::Index off = h * dh;
        const S* qrow = Q.data() + static_cast<Eigen::Index>(q) * d + off;
        S max_score = -std::numeric_limits<S>::infinity();
        for (std::size_t i = 0; i < cols.size(); ++i) {
          S s = scale * detail::dot(qrow, K.data() + static_cast<Eigen::Index>(cols[i]) * d + off, dh);
          if (!layout.allowed(q, cols[i])) s += S(kMaskedLogit);
          p[i] = s;
          max_score = std::max(max_score, s);
        }
        S total = 0;
        for (auto& v : p) total += (v = std::exp(v - max_score));
        S* out = ctx.data() + static_cast<Eigen::Index>(q) * d + off;
        for (std::size_t i = 0; i < cols.size(); ++i)
          detail::axpy(p[i] / total, V.data() + static_cast<Eigen::Index>(cols[i]) * d + off, out, dh);
      }
    }
  }
  return ctx;
}

/// Projections for a single attention call.
template <typename S>
struct AttendWeights {
  Matrix<S> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;

  static AttendWeights identity(Eigen::Index d) {
    AttendWeights w;
    for (auto* m : {&w.w_q, &w.w_k, &w.w_v, &w.w_o}) *m = Matrix<S>::Identity(d, d);
    for (auto* m : {&w.b_q, &w.b_k, &w.b_v, &w.b_o}) *m = Matrix<S>::Zero(1, d);
    return w;
  }
};

/// Attn(targets, sources) over allowed (targets x sources) pairs, heads
/// concatenated and mapped through the output projection.
template <typename S>
Matrix<S> attend(const Matrix<S>& targets, const Matrix<S>& sources, const BoolLayout& allowed,
                 const AttendWeights<S>& w, int heads) {
  if (allowed.rows() != static_cast<std::size_t>(targets.rows()) ||
      allowed.cols() != static_cast<std::size_t>(sources.rows()))
    throw std::invalid_argument("attend: layout shape does not match targets x sources");
  Matrix<S> ctx = masked_attention(affine(targets, w.w_q, w.b_q), affine(sources, w.w_k, w.b_k),
                                   affine(sources, w.w_v, w.b_v), SourceLists::from_layout(allowed), heads);
  return affine(ctx, w.w_o, w.b_o);
}

}  // namespace museformer
