#pragma once

// Adam with an inverse-square-root schedule and the single-process training
// loop: gradient accumulation over songs, periodic validation, best-model
// tracking and early stopping.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "museformer/model.hpp"

namespace museformer {

struct TrainConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  double peak_lr = 5e-4;
  int warmup_steps = 200;
  double weight_decay = 0.01;
  // false adds weight_decay * param to the gradient instead.
  bool decoupled_decay = true;
  int batch_songs = 4;
  int max_steps = 2000;
  std::uint64_t seed = 0;
  int valid_every = 200;
  // Validations without improvement before stopping; 0 never stops early.
  int patience = 0;
  double divergence_factor = 10.0;
  // Crop every song to its first `max_tokens` inputs; 0 keeps them whole.
  std::size_t max_tokens = 0;

  void validate() const {
    if (warmup_steps < 1) throw std::invalid_argument("warmup_steps must be >= 1");
    if (!(peak_lr > 0)) throw std::invalid_argument("peak_lr must be positive");
    if (batch_songs < 1) throw std::invalid_argument("batch_songs must be >= 1");
    if (max_steps < 0) throw std::invalid_argument("max_steps must be >= 0");
    if (valid_every < 1) throw std::invalid_argument("valid_every must be >= 1");
    if (weight_decay < 0) throw std::invalid_argument("weight_decay must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"beta1", c.beta1},
       {"beta2", c.beta2},
       {"epsilon", c.epsilon},
       {"peak_lr", c.peak_lr},
       {"warmup_steps", c.warmup_steps},
       {"weight_decay", c.weight_decay},
       {"decoupled_decay", c.decoupled_decay},
       {"batch_songs", c.batch_songs},
       {"max_steps", c.max_steps},
       {"seed", c.seed},
       {"valid_every", c.valid_every},
       {"patience", c.patience},
       {"divergence_factor", c.divergence_factor},
       {"max_tokens", c.max_tokens}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.epsilon = j.value("epsilon", d.epsilon);
  c.peak_lr = j.value("peak_lr", d.peak_lr);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.decoupled_decay = j.value("decoupled_decay", d.decoupled_decay);
  c.batch_songs = j.value("batch_songs", d.batch_songs);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.seed = j.value("seed", d.seed);
  c.valid_every = j.value("valid_every", d.valid_every);
  c.patience = j.value("patience", d.patience);
  c.divergence_factor = j.value("divergence_factor", d.divergence_factor);
  c.max_tokens = j.value("max_tokens", d.max_tokens);
}

/// peak_lr * min(step / warmup, sqrt(warmup / step)), step >= 1.
inline double lr_at(int step, const TrainConfig& c) {
  if (step < 1) throw std::invalid_argument("lr_at: step must be >= 1");
  const double s = step, w = c.warmup_steps;
  return c.peak_lr * std::min(s / w, std::sqrt(w / s));
}

template <typename S>
struct AdamState {
  ModelParams<S> m, v;
  int step = 0;

  // Moments start at exactly zero, LayerNorm gains included.
  static AdamState zeros(const ModelConfig& c) {
    AdamState s{ModelParams<S>::zeros(c), ModelParams<S>::zeros(c), 0};
    s.m.for_each([](const std::string&, Matrix<S>& t) { t.setZero(); });
    s.v.for_each([](const std::string&, Matrix<S>& t) { t.setZero(); });
    return s;
  }
};

namespace detail {

template <typename P>
auto tensors(P& p) {
  using M = std::remove_reference_t<decltype((p.out_w))>;
  std::vector<M*> out;
  p.for_each([&](const std::string&, M& m) { out.push_back(&m); });
  return out;
}

template <typename S>
bool all_finite(const ModelParams<S>& p) {
  bool ok = true;
  p.for_each([&](const std::string&, const Matrix<S>& m) { ok = ok && m.allFinite(); });
  return ok;
}

}  // namespace detail

/// One Adam update with bias correction. Returns false, leaving everything
/// untouched, when a gradient entry is not finite.
template <typename S>
bool adam_step(ModelParams<S>& params, const ModelParams<S>& grads, AdamState<S>& state, const TrainConfig& c,
               double lr) {
  if (!detail::all_finite(grads)) return false;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, state.step);
  const double bc2 = 1.0 - std::pow(c.beta2, state.step);
  auto p = detail::tensors(params);
  auto m = detail::tensors(state.m);
  auto v = detail::tensors(state.v);
  auto g = detail::tensors(grads);
  const S b1 = static_cast<S>(c.beta1), b2 = static_cast<S>(c.beta2);
  for (std::size_t t = 0; t < p.size(); ++t) {
    S* pd = p[t]->data();
    S* md = m[t]->data();
    S* vd = v[t]->data();
    const S* gd = g[t]->data();
    for (Eigen::Index i = 0; i < p[t]->size(); ++i) {
      double grad = static_cast<double>(gd[i]);
      if (!c.decoupled_decay) grad += c.weight_decay * static_cast<double>(pd[i]);
      md[i] = b1 * md[i] + (S(1) - b1) * static_cast<S>(grad);
      vd[i] = b2 * vd[i] + (S(1) - b2) * static_cast<S>(grad * grad);
      const double mhat = static_cast<double>(md[i]) / bc1;
      const double vhat = static_cast<double>(vd[i]) / bc2;
      double value = static_cast<double>(pd[i]);
      if (c.decoupled_decay) value *= 1.0 - lr * c.weight_decay;
      value -= lr * mhat / (std::sqrt(vhat) + c.epsilon);
      pd[i] = static_cast<S>(value);
    }
  }
  return true;
}

struct StepRecord {
  int step = 0;
  double lr = 0;
  double train_nll = 0;
  bool skipped = false;
};

struct ValidationRecord {
  int step = 0;
  double valid_nll = 0;
  double valid_ppl = 0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<ValidationRecord> validations;
  double wall_seconds = 0;

  /// One row per step; validation columns filled on validation steps.
  void write_csv(std::ostream& out) const {
    out << "step,lr,train_nll,valid_nll,valid_ppl,skipped\n";
    out << std::setprecision(17);
    std::size_t v = 0;
    for (const auto& s : steps) {
      out << s.step << "," << s.lr << "," << s.train_nll << ",";
      while (v < validations.size() && validations[v].step < s.step) ++v;
      if (v < validations.size() && validations[v].step == s.step)
        out << validations[v].valid_nll << "," << validations[v].valid_ppl;
      else
        out << ",";
      out << "," << (s.skipped ? 1 : 0) << "\n";
    }
  }
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(int step, double loss, double initial)
      : std::runtime_error("training diverged at step " + std::to_string(step) + ": nll " + std::to_string(loss) +
                           " exceeds the limit over initial nll " + std::to_string(initial)),
        step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

template <typename S>
struct TrainResult {
  ModelParams<S> best;
  ModelParams<S> last;
  TrainLog log;
  double best_valid_nll = std::numeric_limits<double>::infinity();
  int best_step = 0;
  bool stopped_early = false;
};

/// Called after each validation with (step, valid nll, improved).
template <typename S>
using ValidationHook = std::function<void(int, double, bool, const ModelParams<S>&)>;

/// Trains from `init`. Deterministic for a given seed. With an empty
/// validation set the last parameters count as best.
template <typename S>
TrainResult<S> train(std::span<const ModelSequence> train_set, std::span<const ModelSequence> valid_set,
                     const ModelConfig& mc, const TrainConfig& tc, ModelParams<S> init,
                     const ValidationHook<S>& on_validation = {}) {
  mc.validate();
  tc.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training corpus");
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<ModelSequence> songs(train_set.begin(), train_set.end());
  std::vector<ModelSequence> valid(valid_set.begin(), valid_set.end());
  if (tc.max_tokens > 0) {
    for (auto& s : songs) s = s.prefix(tc.max_tokens);
    for (auto& s : valid) s = s.prefix(tc.max_tokens);
  }

  TrainResult<S> r;
  r.last = std::move(init);
  r.best = r.last;
  AdamState<S> adam = AdamState<S>::zeros(mc);
  ModelParams<S> grads = ModelParams<S>::zeros(mc);
  LayoutCache layouts;
  std::mt19937_64 rng(tc.seed);
  std::vector<std::size_t> order(songs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  std::optional<double> initial;
  int since_best = 0;

  auto validate_now = [&](int step) {
    double nll = valid.empty() ? r.log.steps.back().train_nll
                               : mean_nll(r.last, mc, std::span<const ModelSequence>(valid), &layouts);
    r.log.validations.push_back({step, nll, std::exp(nll)});
    const bool improved = nll < r.best_valid_nll || valid.empty();
    if (improved) {
      r.best_valid_nll = nll;
      r.best_step = step;
      r.best = r.last;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (on_validation) on_validation(step, nll, improved, r.last);
  };

  for (int step = 1; step <= tc.max_steps; ++step) {
    grads.for_each([](const std::string&, Matrix<S>& m) { m.setZero(); });
    double loss = 0;
    const S scale = S(1) / static_cast<S>(tc.batch_songs);
    for (int b = 0; b < tc.batch_songs; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      loss += loss_and_gradient(r.last, mc, songs[order[cursor++]], grads, scale, &layouts);
    }
    loss /= tc.batch_songs;
    const double lr = lr_at(step, tc);
    if (!initial) initial = loss;
    if (std::isfinite(loss) && loss > tc.divergence_factor * *initial) throw TrainingDiverged(step, loss, *initial);
    const bool applied = std::isfinite(loss) && adam_step(r.last, grads, adam, tc, lr);
    r.log.steps.push_back({step, lr, loss, !applied});
    if (step % tc.valid_every == 0 || step == tc.max_steps) {
      validate_now(step);
      if (tc.patience > 0 && since_best >= tc.patience) {
        r.stopped_early = true;
        break;
      }
    }
  }
  r.log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace museformer
