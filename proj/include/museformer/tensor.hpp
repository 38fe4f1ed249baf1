#pragma once

// Dense building blocks with hand-written gradients: affine maps, layer
// normalization, ReLU feed-forward.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

namespace museformer {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;

/// y = x W + b, with b a 1 x out row broadcast over rows.
template <typename S>
Matrix<S> affine(const Matrix<S>& x, const Matrix<S>& w, const Matrix<S>& b) {
  Matrix<S> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

/// Accumulates dW and db; returns dx.
template <typename S>
Matrix<S> affine_backward(const Matrix<S>& x, const Matrix<S>& w, const Matrix<S>& dy, Matrix<S>& dw, Matrix<S>& db) {
  dw.noalias() += x.transpose() * dy;
  db.row(0) += dy.colwise().sum();
  return dy * w.transpose();
}

template <typename S>
struct LayerNormCache {
  Matrix<S> normalized;  // (x - mean) / std, before gain and bias
  std::vector<S> inv_std;
};

inline constexpr double kLayerNormEps = 1e-5;

template <typename S>
Matrix<S> layer_norm(const Matrix<S>& x, const Matrix<S>& gain, const Matrix<S>& bias, std::type_identity_t<LayerNormCache<S>>* cache) {
  const auto d = x.cols();
  Matrix<S> xhat(x.rows(), d);
  std::vector<S> inv_std(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S mean = x.row(r).mean();
    const S var = (x.row(r).array() - mean).square().mean();
    const S inv = S(1) / std::sqrt(var + S(kLayerNormEps));
    xhat.row(r) = (x.row(r).array() - mean) * inv;
    inv_std[static_cast<std::size_t>(r)] = inv;
  }
  Matrix<S> y = xhat.array().rowwise() * gain.row(0).array();
  y.rowwise() += bias.row(0);
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename S>
Matrix<S> layer_norm_backward(const LayerNormCache<S>& cache, const Matrix<S>& gain, const Matrix<S>& dy,
                              Matrix<S>& dgain, Matrix<S>& dbias) {
  const Matrix<S>& xhat = cache.normalized;
  dgain.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  const S d = static_cast<S>(dy.cols());
  Matrix<S> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    RowVector<S> g = (dy.row(r).array() * gain.row(0).array()).matrix();
    const S sum_g = g.sum();
    const S sum_gx = g.dot(xhat.row(r));
    dx.row(r) = (cache.inv_std[static_cast<std::size_t>(r)] / d) *
                (d * g.array() - sum_g - xhat.row(r).array() * sum_gx).matrix();
  }
  return dx;
}

template <typename S>
struct FeedForwardCache {
  Matrix<S> input;
  Matrix<S> hidden;  // after ReLU
};

/// relu(x W1 + b1) W2 + b2
template <typename S>
Matrix<S> feed_forward(const Matrix<S>& x, const Matrix<S>& w1, const Matrix<S>& b1, const Matrix<S>& w2,
                       const Matrix<S>& b2, std::type_identity_t<FeedForwardCache<S>>* cache) {
  Matrix<S> h = affine(x, w1, b1).cwiseMax(S(0));
  Matrix<S> y = affine(h, w2, b2);
  if (cache) {
    cache->input = x;
    cache->hidden = std::move(h);
  }
  return y;
}

template <typename S>
Matrix<S> feed_forward_backward(const FeedForwardCache<S>& cache, const Matrix<S>& w1, const Matrix<S>& w2,
                                const Matrix<S>& dy, Matrix<S>& dw1, Matrix<S>& db1, Matrix<S>& dw2,
                                Matrix<S>& db2) {
  Matrix<S> dh = affine_backward(cache.hidden, w2, dy, dw2, db2);
  dh = (cache.hidden.array() > S(0)).select(dh, S(0));
  return affine_backward(cache.input, w1, dh, dw1, db1);
}

template <typename S>
Matrix<S> zeros_like(const Matrix<S>& m) {
  return Matrix<S>::Zero(m.rows(), m.cols());
}

}  // namespace museformer
