#pragma once

// Bar-level note-set similarity and its distribution over bar intervals.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "museformer/bar_selection.hpp"
#include "museformer/tokenizer.hpp"
#include "museformer/tracks.hpp"

namespace museformer {

/// Identity of a note for similarity: pitch, duration and position in the bar
/// (grid units). `role` only distinguishes tracks when several are pooled.
struct NoteKey {
  int role = 0;
  int pitch = 0;
  int duration = 0;
  int position = 0;

  friend auto operator<=>(const NoteKey&, const NoteKey&) = default;
};

/// Set of notes in one bar; duplicates collapse.
class BarNoteSet {
 public:
  BarNoteSet() = default;
  BarNoteSet(std::initializer_list<NoteKey> keys) : BarNoteSet(std::vector<NoteKey>(keys)) {}
  explicit BarNoteSet(std::vector<NoteKey> keys) : keys_(std::move(keys)) {
    std::sort(keys_.begin(), keys_.end());
    keys_.erase(std::unique(keys_.begin(), keys_.end()), keys_.end());
  }

  const std::vector<NoteKey>& keys() const { return keys_; }
  std::size_t size() const { return keys_.size(); }
  bool empty() const { return keys_.empty(); }
  friend bool operator==(const BarNoteSet&, const BarNoteSet&) = default;

 private:
  std::vector<NoteKey> keys_;
};

/// Jaccard index |a ∩ b| / |a ∪ b|. Two empty bars have no defined
/// similarity and yield nullopt.
inline std::optional<double> bar_similarity(const BarNoteSet& a, const BarNoteSet& b) {
  if (a.empty() && b.empty()) return std::nullopt;
  std::size_t common = 0;
  auto i = a.keys().begin(), j = b.keys().begin();
  while (i != a.keys().end() && j != b.keys().end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++common;
      ++i;
      ++j;
    }
  }
  return static_cast<double>(common) / static_cast<double>(a.size() + b.size() - common);
}

/// Which tracks a distribution is computed over; nullopt pools all roles.
struct TrackScope {
  std::optional<Role> role = Role::melody;

  static TrackScope all() { return {std::nullopt}; }
  std::string name() const { return role ? std::string(role_name(*role)) : "all"; }
  static TrackScope parse(const std::string& s) {
    if (s == "all") return all();
    auto r = parse_role(s);
    if (!r) throw std::invalid_argument("unknown track scope '" + s + "'");
    return {r};
  }
};

/// Per-bar note sets of one song restricted to `scope`.
inline std::vector<BarNoteSet> bar_note_sets(const TrackSet& ts, TrackScope scope = {},
                                             const TokenizerConfig& cfg = {}) {
  auto table = bar_note_table(ts, cfg);
  std::vector<BarNoteSet> bars;
  bars.reserve(table.size());
  for (const auto& bar : table) {
    std::vector<NoteKey> keys;
    for (Role r : kRoles) {
      if (scope.role && *scope.role != r) continue;
      int tag = scope.role ? 0 : static_cast<int>(role_index(r));
      for (const auto& c : bar[role_index(r)]) keys.push_back({tag, c.pitch, c.duration, c.position});
    }
    bars.emplace_back(std::move(keys));
  }
  return bars;
}

struct SimilarityOptions {
  int horizon = 40;
  // Count pairs of two empty bars as similarity 1 instead of skipping them.
  bool both_empty_as_one = false;
  // Average per-song means instead of pooling every bar pair.
  bool per_song_mean = false;
};

/// L_t for t = 1..horizon; index 0 is unused. Intervals without any
/// contributing pair have L_t = 0 and count 0.
struct SimilarityDistribution {
  int horizon = 40;
  std::vector<double> L;
  std::vector<std::int64_t> counts;
  std::string scope = "melody";

  double at(int t) const { return L.at(static_cast<std::size_t>(t)); }
};

using SongBars = std::vector<BarNoteSet>;

inline SimilarityDistribution similarity_distribution(std::span<const SongBars> corpus,
                                                      const SimilarityOptions& opt = {},
                                                      const std::string& scope_name = "melody") {
  if (opt.horizon < 1) throw std::invalid_argument("similarity horizon must be >= 1");
  const auto T = static_cast<std::size_t>(opt.horizon);
  SimilarityDistribution d;
  d.horizon = opt.horizon;
  d.scope = scope_name;
  d.L.assign(T + 1, 0.0);
  d.counts.assign(T + 1, 0);
  std::vector<double> song_weight(T + 1, 0.0);

  std::vector<double> sum(T + 1);
  std::vector<std::int64_t> count(T + 1);
  for (const auto& bars : corpus) {
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(count.begin(), count.end(), 0);
    for (std::size_t t = 1; t <= T && t < bars.size(); ++t) {
      for (std::size_t i = 0; i + t < bars.size(); ++i) {
        auto l = bar_similarity(bars[i], bars[i + t]);
        if (!l && !opt.both_empty_as_one) continue;
        // Pooled sums accumulate straight into L so the order is song, then bar.
        (opt.per_song_mean ? sum[t] : d.L[t]) += l.value_or(1.0);
        ++count[t];
      }
    }
    for (std::size_t t = 1; t <= T; ++t) {
      if (count[t] == 0) continue;
      d.counts[t] += count[t];
      if (opt.per_song_mean) {
        d.L[t] += sum[t] / static_cast<double>(count[t]);
        song_weight[t] += 1.0;
      }
    }
  }
  for (std::size_t t = 1; t <= T; ++t) {
    double denom = opt.per_song_mean ? song_weight[t] : static_cast<double>(d.counts[t]);
    d.L[t] = denom > 0 ? d.L[t] / denom : 0.0;
  }
  return d;
}

/// Mean absolute difference of L_t over t = 1..T.
inline double similarity_error(const SimilarityDistribution& generated, const SimilarityDistribution& reference,
                               int T = 40) {
  if (T < 1) throw std::invalid_argument("similarity error horizon must be >= 1");
  if (generated.horizon < T || reference.horizon < T)
    throw std::invalid_argument("similarity error: horizon mismatch (need " + std::to_string(T) + ", have " +
                                std::to_string(generated.horizon) + " and " + std::to_string(reference.horizon) +
                                ")");
  double total = 0.0;
  for (int t = 1; t <= T; ++t) total += std::abs(generated.at(t) - reference.at(t));
  return total / T;
}

/// Picks k offsets in [1, max_offset]: 1 and 2 first, then the offsets with
/// the highest L_t, smaller offset first on ties. Returned sorted.
inline BarSelection select_structure_bars(const SimilarityDistribution& dist, int k, int max_offset) {
  if (k < 1) throw std::invalid_argument("select_structure_bars: k must be >= 1");
  if (k > max_offset) throw std::invalid_argument("select_structure_bars: k exceeds max_offset");
  if (max_offset > dist.horizon) throw std::invalid_argument("select_structure_bars: max_offset exceeds horizon");
  std::vector<int> chosen;
  for (int forced : {1, 2})
    if (static_cast<int>(chosen.size()) < k && forced <= max_offset) chosen.push_back(forced);
  std::vector<int> rest;
  for (int t = 3; t <= max_offset; ++t) rest.push_back(t);
  std::stable_sort(rest.begin(), rest.end(), [&](int a, int b) { return dist.at(a) > dist.at(b); });
  for (int t : rest) {
    if (static_cast<int>(chosen.size()) >= k) break;
    chosen.push_back(t);
  }
  return BarSelection(std::move(chosen));
}

// CSV with header `t,L_t,count`.
inline void write_distribution_csv(std::ostream& out, const SimilarityDistribution& d) {
  out << "t,L_t,count\n";
  out << std::setprecision(17);
  for (int t = 1; t <= d.horizon; ++t) out << t << "," << d.at(t) << "," << d.counts[static_cast<std::size_t>(t)] << "\n";
}

inline SimilarityDistribution read_distribution_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("t,", 0) != 0) throw std::invalid_argument("distribution CSV: missing header");
  std::vector<std::tuple<int, double, std::int64_t>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    int t = 0;
    double l = 0;
    std::int64_t c = 0;
    char c1 = 0, c2 = 0;
    if (!(ls >> t >> c1 >> l >> c2 >> c) || c1 != ',' || c2 != ',')
      throw std::invalid_argument("distribution CSV: malformed row '" + line + "'");
    rows.emplace_back(t, l, c);
  }
  SimilarityDistribution d;
  d.horizon = static_cast<int>(rows.size());
  d.L.assign(rows.size() + 1, 0.0);
  d.counts.assign(rows.size() + 1, 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto [t, l, c] = rows[i];
    if (t != static_cast<int>(i) + 1) throw std::invalid_argument("distribution CSV: rows must be t = 1..T in order");
    d.L[i + 1] = l;
    d.counts[i + 1] = c;
  }
  return d;
}

}  // namespace museformer
