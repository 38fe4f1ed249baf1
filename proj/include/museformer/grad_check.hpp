#pragma once

// Central finite-difference check of analytic parameter gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace museformer {

struct GroupCheck {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0;
  double max_abs_analytic = 0;
};

struct GradCheckResult {
  std::vector<GroupCheck> groups;
  double max_rel_error = 0;
};

struct GradCheckOptions {
  double eps = 1e-5;
  // Entries per tensor: the one with the largest analytic gradient plus
  // random others. Tensors no larger than this are checked exhaustively.
  std::size_t samples_per_group = 12;
  // Denominator floor; keeps rounding noise on near-zero gradients from
  // reading as large relative error.
  double floor = 1e-6;
  std::uint64_t seed = 0;
};

/// `params` and `analytic` expose for_each(name, matrix&) over 64-bit
/// tensors in the same order; `loss` evaluates the objective at the current
/// `params`.
template <typename Params, typename Loss>
GradCheckResult grad_check(Params& params, const Params& analytic, Loss&& loss, const GradCheckOptions& opt = {}) {
  std::vector<std::pair<std::string, double*>> slots;
  std::vector<const double*> grads;
  std::vector<std::size_t> sizes;
  params.for_each([&](const std::string& name, auto& m) {
    slots.emplace_back(name, m.data());
    sizes.push_back(static_cast<std::size_t>(m.size()));
  });
  analytic.for_each([&](const std::string&, const auto& m) { grads.push_back(m.data()); });

  std::mt19937_64 rng(opt.seed);
  GradCheckResult result;
  for (std::size_t t = 0; t < slots.size(); ++t) {
    GroupCheck g;
    g.name = slots[t].first;
    const std::size_t n = sizes[t];
    std::vector<std::size_t> picks;
    if (n <= opt.samples_per_group) {
      for (std::size_t i = 0; i < n; ++i) picks.push_back(i);
    } else {
      std::size_t largest = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (std::abs(grads[t][i]) > std::abs(grads[t][largest])) largest = i;
      picks.push_back(largest);
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      while (picks.size() < opt.samples_per_group) picks.push_back(pick(rng));
    }
    auto* data = slots[t].second;
    for (std::size_t i : picks) {
      const auto saved = data[i];
      data[i] = saved + opt.eps;
      const double plus = loss();
      data[i] = saved - opt.eps;
      const double minus = loss();
      data[i] = saved;
      const double fd = (plus - minus) / (2 * opt.eps);
      const double a = static_cast<double>(grads[t][i]);
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), opt.floor});
      g.max_rel_error = std::max(g.max_rel_error, rel);
      g.max_abs_analytic = std::max(g.max_abs_analytic, std::abs(a));
      ++g.checked;
    }
    result.max_rel_error = std::max(result.max_rel_error, g.max_rel_error);
    result.groups.push_back(std::move(g));
  }
  return result;
}

}  // namespace museformer
