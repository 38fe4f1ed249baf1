#pragma once

// Synthetic songs with planted bar repetition, used for smoke training,
// ablations and scaling sweeps.

#include <algorithm>
#include <cstdint>
#include <random>
#include <set>
#include <stdexcept>
#include <vector>

#include "museformer/layout.hpp"
#include "museformer/tracks.hpp"

namespace museformer {

struct SyntheticOptions {
  int bars = 16;
  // Bar i repeats bar i - period; the first `period` bars are drawn at random.
  int period = 4;
  int min_notes = 3;
  int max_notes = 6;
  int pitch_low = 60;
  int pitch_high = 79;
  // Longest note, in sixteenths.
  int max_duration = 4;
  Role role = Role::melody;

  void validate() const {
    if (bars < 1 || period < 1) throw std::invalid_argument("synthetic: bars and period must be positive");
    if (min_notes < 0 || max_notes < min_notes || max_notes > 16)
      throw std::invalid_argument("synthetic: need 0 <= min_notes <= max_notes <= 16");
    if (pitch_low > pitch_high) throw std::invalid_argument("synthetic: empty pitch range");
    if (max_duration < 1) throw std::invalid_argument("synthetic: max_duration must be >= 1");
  }
};

/// One bar of random notes on distinct sixteenth positions, relative onsets.
inline std::vector<Note> random_bar(const SyntheticOptions& opt, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(opt.min_notes, opt.max_notes);
  std::uniform_int_distribution<int> slot(0, 15);
  std::uniform_int_distribution<int> pitch(opt.pitch_low, opt.pitch_high);
  std::uniform_int_distribution<int> dur(1, opt.max_duration);
  const int n = count(rng);
  std::set<int> positions;
  while (static_cast<int>(positions.size()) < n) positions.insert(slot(rng));
  std::vector<Note> notes;
  for (int p : positions) {
    Note note;
    note.onset = Beats(p, 4);
    note.duration = Beats(std::min(dur(rng), 16 - p), 4);
    note.pitch = pitch(rng);
    notes.push_back(note);
  }
  return notes;
}

/// A 4/4 song whose bar i equals bar i mod period.
inline TrackSet periodic_song(const SyntheticOptions& opt, std::mt19937_64& rng) {
  opt.validate();
  std::vector<std::vector<Note>> motifs;
  for (int i = 0; i < std::min(opt.period, opt.bars); ++i) motifs.push_back(random_bar(opt, rng));
  TrackSet ts;
  for (int b = 0; b < opt.bars; ++b) {
    const Beats start(4 * b);
    ts.bars.push_back({start, Beats(4)});
    for (Note n : motifs[static_cast<std::size_t>(b % opt.period)]) {
      n.onset += start;
      ts.role(opt.role).push_back(n);
    }
  }
  std::sort(ts.role(opt.role).begin(), ts.role(opt.role).end());
  return ts;
}

inline std::vector<TrackSet> periodic_corpus(std::size_t songs, const SyntheticOptions& opt, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TrackSet> out;
  out.reserve(songs);
  for (std::size_t i = 0; i < songs; ++i) out.push_back(periodic_song(opt, rng));
  return out;
}

/// `bars` bars of `tokens_per_bar` music tokens each.
inline LayoutSpec uniform_layout_spec(std::size_t bars, int tokens_per_bar, BarSelection selection) {
  LayoutSpec spec;
  spec.bar_lengths.assign(bars, tokens_per_bar);
  spec.selection = std::move(selection);
  return spec;
}

}  // namespace museformer
