#pragma once

// Note-level view of a MIDI piece: six canonical instrument roles, bars
// derived from time signatures, grid quantization and the corpus filter.

#include <algorithm>
#include <array>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include <boost/rational.hpp>

#include "museformer/midi.hpp"

namespace museformer {

/// Positions in time, in quarter-note beats, kept exact.
using Beats = boost::rational<std::int64_t>;

enum class Role : std::uint8_t { melody = 0, piano, guitar, string, bass, drum };

inline constexpr std::size_t kRoleCount = 6;
inline constexpr std::array<Role, kRoleCount> kRoles = {Role::melody, Role::piano, Role::guitar,
                                                       Role::string, Role::bass, Role::drum};
inline constexpr int kDrumChannel = 9;

inline std::string_view role_name(Role r) {
  static constexpr std::array<std::string_view, kRoleCount> names = {"melody", "piano",  "guitar",
                                                                     "string", "bass",   "drum"};
  return names[static_cast<std::size_t>(r)];
}

inline std::optional<Role> parse_role(std::string_view name) {
  for (Role r : kRoles)
    if (role_name(r) == name) return r;
  return std::nullopt;
}

inline std::size_t role_index(Role r) { return static_cast<std::size_t>(r); }

struct Note {
  int pitch = 60;
  Beats onset{0};
  Beats duration{1};
  int velocity = 80;

  // Velocity is not part of a note's identity downstream.
  friend bool operator==(const Note& a, const Note& b) {
    return a.pitch == b.pitch && a.onset == b.onset && a.duration == b.duration;
  }
  friend bool operator<(const Note& a, const Note& b) {
    return std::tie(a.onset, a.pitch, a.duration) < std::tie(b.onset, b.pitch, b.duration);
  }
};

struct Bar {
  Beats start{0};
  Beats length{4};

  Beats end() const { return start + length; }
  friend bool operator==(const Bar&, const Bar&) = default;
};

struct TimeSignature {
  int numerator = 4;
  int denominator = 4;
  friend bool operator==(const TimeSignature&, const TimeSignature&) = default;
};

struct TrackSet {
  std::array<std::vector<Note>, kRoleCount> notes;
  std::vector<Bar> bars;
  double tempo_bpm = 120.0;
  std::vector<double> tempos{120.0};
  std::vector<TimeSignature> time_signatures{TimeSignature{}};
  std::vector<std::string> warnings;

  std::vector<Note>& role(Role r) { return notes[role_index(r)]; }
  const std::vector<Note>& role(Role r) const { return notes[role_index(r)]; }

  std::size_t note_count() const {
    std::size_t n = 0;
    for (const auto& v : notes) n += v.size();
    return n;
  }

  /// Index of the bar containing `t`, or nullopt when outside every bar.
  std::optional<std::size_t> bar_of(Beats t) const {
    auto it = std::upper_bound(bars.begin(), bars.end(), t, [](Beats v, const Bar& b) { return v < b.start; });
    if (it == bars.begin()) return std::nullopt;
    --it;
    if (t >= it->end()) return std::nullopt;
    return static_cast<std::size_t>(it - bars.begin());
  }
};

// ---------------------------------------------------------------------------
// Program -> role mapping

/// General MIDI program to role table. Channel 9 always maps to drum.
class RoleMapping {
 public:
  RoleMapping() { table_.fill(Role::piano); }

  static RoleMapping general_midi() {
    RoleMapping m;
    auto fill = [&](int lo, int hi, Role r) {
      for (int p = lo; p <= hi; ++p) m.table_[static_cast<std::size_t>(p)] = r;
    };
    fill(0, 7, Role::piano);      // pianos
    fill(8, 15, Role::piano);     // chromatic percussion
    fill(16, 23, Role::piano);    // organs
    fill(24, 31, Role::guitar);   // guitars
    fill(32, 39, Role::bass);     // basses
    fill(40, 55, Role::string);   // strings, ensembles, choir
    fill(56, 79, Role::string);   // brass, reed, pipe
    fill(80, 81, Role::melody);   // square and saw leads
    fill(82, 87, Role::piano);    // other leads
    fill(88, 95, Role::string);   // pads
    fill(96, 103, Role::piano);   // synth effects
    fill(104, 111, Role::guitar); // ethnic (mostly plucked)
    fill(112, 127, Role::piano);  // percussive, sound effects
    return m;
  }

  /// Reads override lines of the form `<program>[-<program>] <role>`; `#` starts a comment.
  static RoleMapping from_stream(std::istream& in, RoleMapping base = general_midi()) {
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      std::istringstream ls(line);
      std::string range, role;
      if (!(ls >> range)) continue;
      if (!(ls >> role)) throw std::invalid_argument("mapping line " + std::to_string(line_no) + ": missing role");
      auto r = parse_role(role);
      if (!r) throw std::invalid_argument("mapping line " + std::to_string(line_no) + ": unknown role " + role);
      int lo = 0, hi = 0;
      try {
        auto dash = range.find('-');
        lo = std::stoi(range.substr(0, dash));
        hi = dash == std::string::npos ? lo : std::stoi(range.substr(dash + 1));
      } catch (const std::exception&) {
        throw std::invalid_argument("mapping line " + std::to_string(line_no) + ": bad program range " + range);
      }
      if (lo < 0 || hi > 127 || lo > hi)
        throw std::invalid_argument("mapping line " + std::to_string(line_no) + ": program out of range");
      for (int p = lo; p <= hi; ++p) base.table_[static_cast<std::size_t>(p)] = *r;
    }
    return base;
  }

  Role role_for(int program, int channel) const {
    if (channel == kDrumChannel) return Role::drum;
    return table_[static_cast<std::size_t>(program & 0x7F)];
  }

  void set(int program, Role r) { table_.at(static_cast<std::size_t>(program)) = r; }

 private:
  std::array<Role, 128> table_{};
};

// ---------------------------------------------------------------------------
// Track compression

namespace detail {

inline std::vector<Bar> derive_bars(const std::vector<std::pair<Beats, TimeSignature>>& changes, Beats last_onset) {
  std::vector<Bar> bars;
  std::size_t next_change = 1;
  TimeSignature ts = changes.front().second;
  Beats start{0};
  while (start <= last_onset) {
    while (next_change < changes.size() && changes[next_change].first <= start) ts = changes[next_change++].second;
    Beats length = Beats(4 * ts.numerator, ts.denominator);
    if (next_change < changes.size() && changes[next_change].first < start + length)
      length = changes[next_change].first - start;
    bars.push_back({start, length});
    start += length;
  }
  return bars;
}

}  // namespace detail

/// Pairs note events into notes, assigns every note one role and derives
/// bars from the time-signature map. Note count is conserved.
inline TrackSet compress_tracks(const MidiPiece& piece, const RoleMapping& mapping = RoleMapping::general_midi()) {
  TrackSet ts;
  const std::int64_t tpq = piece.ticks_per_quarter;
  auto beats = [tpq](std::uint64_t tick) { return Beats(static_cast<std::int64_t>(tick), tpq); };

  std::optional<Beats> last_onset;
  for (const auto& track : piece.tracks) {
    std::vector<std::vector<MidiNoteEvent>> open(16 * 128);
    std::vector<std::size_t> open_head(16 * 128, 0);
    for (const auto& ev : track.events) {
      std::size_t key = std::size_t{ev.channel} * 128 + ev.pitch;
      if (ev.on) {
        open[key].push_back(ev);
        continue;
      }
      if (open_head[key] >= open[key].size()) continue;
      const MidiNoteEvent& start = open[key][open_head[key]++];
      Note n;
      n.pitch = start.pitch;
      n.onset = beats(start.tick);
      n.duration = beats(ev.tick) - n.onset;
      n.velocity = start.velocity;
      // Zero-length notes are stretched to one tick so duration stays positive.
      if (n.duration <= Beats(0)) n.duration = Beats(1, tpq);
      ts.role(mapping.role_for(start.program, start.channel)).push_back(n);
      last_onset = last_onset ? std::max(*last_onset, n.onset) : n.onset;
    }
  }
  for (auto& v : ts.notes) std::stable_sort(v.begin(), v.end());

  std::vector<std::pair<Beats, TimeSignature>> changes;
  for (const auto& e : piece.time_signatures) {
    TimeSignature sig{e.numerator, e.denominator};
    if (!changes.empty() && changes.back().first == beats(e.tick))
      changes.back().second = sig;
    else
      changes.emplace_back(beats(e.tick), sig);
  }
  if (changes.empty() || changes.front().first != Beats(0)) {
    if (changes.empty()) ts.warnings.push_back("no time signature present; assuming 4/4");
    changes.insert(changes.begin(), {Beats(0), TimeSignature{}});
  }
  ts.time_signatures.clear();
  for (const auto& c : changes) ts.time_signatures.push_back(c.second);
  if (last_onset) ts.bars = detail::derive_bars(changes, *last_onset);

  ts.tempos.clear();
  for (const auto& t : piece.tempo_events) ts.tempos.push_back(t.bpm());
  if (ts.tempos.empty()) ts.tempos.push_back(120.0);
  ts.tempo_bpm = ts.tempos.front();
  return ts;
}

// ---------------------------------------------------------------------------
// Quantization

inline Beats round_to_grid(Beats value, Beats grid) {
  Beats q = value / grid + Beats(1, 2);
  std::int64_t n = q.numerator() / q.denominator();
  if (q.numerator() < 0 && q.numerator() % q.denominator() != 0) --n;
  return grid * n;
}

/// Snaps onsets and durations to the nearest grid multiple (halves round
/// up); durations never drop below one grid unit.
inline TrackSet quantize(TrackSet ts, Beats grid = Beats(1, 4)) {
  if (grid <= 0) throw std::invalid_argument("quantize: grid must be positive");
  for (auto& notes : ts.notes) {
    for (auto& n : notes) {
      n.onset = std::max(Beats(0), round_to_grid(n.onset, grid));
      n.duration = std::max(grid, round_to_grid(n.duration, grid));
    }
    std::stable_sort(notes.begin(), notes.end());
  }
  return ts;
}

// ---------------------------------------------------------------------------
// Filtering

enum class RejectReason : std::uint8_t {
  time_signature,
  min_instruments,
  melody_missing,
  tempo_range,
  pitch_range,
  max_note_duration,
  empty_bars,
  uniform_values,
};

inline constexpr std::array<RejectReason, 8> kFilterOrder = {
    RejectReason::time_signature, RejectReason::min_instruments,   RejectReason::melody_missing,
    RejectReason::tempo_range,    RejectReason::pitch_range,       RejectReason::max_note_duration,
    RejectReason::empty_bars,     RejectReason::uniform_values,
};

inline std::string_view reason_code(RejectReason r) {
  switch (r) {
    case RejectReason::time_signature: return "time_signature";
    case RejectReason::min_instruments: return "min_instruments";
    case RejectReason::melody_missing: return "melody_missing";
    case RejectReason::tempo_range: return "tempo_range";
    case RejectReason::pitch_range: return "pitch_range";
    case RejectReason::max_note_duration: return "max_note_duration";
    case RejectReason::empty_bars: return "empty_bars";
    case RejectReason::uniform_values: return "uniform_values";
  }
  return "unknown";
}

struct FilterRules {
  bool require_44 = true;
  int min_instruments = 2;
  bool require_melody = true;
  double min_tempo = 24.0;
  double max_tempo = 200.0;
  int min_pitch = 21;
  int max_pitch = 108;
  Beats max_note_duration{16};
  int max_consecutive_empty_bars = 3;
  bool reject_uniform_pitch_or_duration = true;

  void validate() const {
    if (min_tempo > max_tempo) throw std::invalid_argument("filter rules: min_tempo > max_tempo");
    if (min_pitch > max_pitch) throw std::invalid_argument("filter rules: min_pitch > max_pitch");
    if (min_instruments < 0 || max_consecutive_empty_bars < 0)
      throw std::invalid_argument("filter rules: negative count");
  }
};

struct FilterVerdict {
  std::optional<RejectReason> reject;

  bool accepted() const { return !reject.has_value(); }
  static FilterVerdict accept() { return {}; }
};

/// True when `ts` satisfies the single rule `rule`.
inline bool passes_rule(const TrackSet& ts, const FilterRules& rules, RejectReason rule) {
  switch (rule) {
    case RejectReason::time_signature: {
      if (!rules.require_44) return true;
      for (const auto& sig : ts.time_signatures)
        if (sig != TimeSignature{4, 4}) return false;
      for (const auto& bar : ts.bars)
        if (bar.length != Beats(4)) return false;
      return true;
    }
    case RejectReason::min_instruments: {
      int used = 0;
      for (const auto& v : ts.notes) used += v.empty() ? 0 : 1;
      return used >= rules.min_instruments;
    }
    case RejectReason::melody_missing:
      return !rules.require_melody || !ts.role(Role::melody).empty();
    case RejectReason::tempo_range:
      return std::all_of(ts.tempos.begin(), ts.tempos.end(),
                         [&](double t) { return t >= rules.min_tempo && t <= rules.max_tempo; });
    case RejectReason::pitch_range:
      for (Role r : kRoles) {
        if (r == Role::drum) continue;
        for (const auto& n : ts.role(r))
          if (n.pitch < rules.min_pitch || n.pitch > rules.max_pitch) return false;
      }
      return true;
    case RejectReason::max_note_duration:
      for (const auto& v : ts.notes)
        for (const auto& n : v)
          if (n.duration > rules.max_note_duration) return false;
      return true;
    case RejectReason::empty_bars: {
      std::vector<char> occupied(ts.bars.size(), 0);
      for (const auto& v : ts.notes)
        for (const auto& n : v)
          if (auto b = ts.bar_of(n.onset)) occupied[*b] = 1;
      int run = 0;
      for (char o : occupied) {
        run = o ? 0 : run + 1;
        if (run > rules.max_consecutive_empty_bars) return false;
      }
      return true;
    }
    case RejectReason::uniform_values: {
      if (!rules.reject_uniform_pitch_or_duration) return true;
      std::set<int> pitches;
      std::set<Beats> durations;
      for (const auto& v : ts.notes)
        for (const auto& n : v) {
          pitches.insert(n.pitch);
          durations.insert(n.duration);
        }
      return pitches.size() > 1 && durations.size() > 1;
    }
  }
  return true;
}

/// Applies every rule in `order`; the verdict carries the first failing rule.
inline FilterVerdict filter_piece(const TrackSet& ts, const FilterRules& rules,
                                  std::span<const RejectReason> order = kFilterOrder) {
  for (RejectReason rule : order)
    if (!passes_rule(ts, rules, rule)) return {rule};
  return FilterVerdict::accept();
}

/// Corpus-level duplicate key: total length, bar count, note count,
/// distinct onset count and instrument count.
struct DuplicateKey {
  Beats duration{0};
  std::size_t bars = 0;
  std::size_t notes = 0;
  std::size_t distinct_positions = 0;
  std::size_t instruments = 0;

  friend bool operator<(const DuplicateKey& a, const DuplicateKey& b) {
    return std::tie(a.duration, a.bars, a.notes, a.distinct_positions, a.instruments) <
           std::tie(b.duration, b.bars, b.notes, b.distinct_positions, b.instruments);
  }
};

inline DuplicateKey duplicate_key(const TrackSet& ts) {
  DuplicateKey k;
  k.duration = ts.bars.empty() ? Beats(0) : ts.bars.back().end();
  k.bars = ts.bars.size();
  k.notes = ts.note_count();
  std::set<Beats> onsets;
  for (const auto& v : ts.notes) {
    k.instruments += v.empty() ? 0 : 1;
    for (const auto& n : v) onsets.insert(n.onset);
  }
  k.distinct_positions = onsets.size();
  return k;
}

class DuplicateFilter {
 public:
  /// Returns true the first time a key is seen.
  bool admit(const TrackSet& ts) { return seen_.insert(duplicate_key(ts)).second; }

 private:
  std::set<DuplicateKey> seen_;
};

// ---------------------------------------------------------------------------
// TrackSet -> MIDI

struct RoleVoice {
  int channel;
  int program;
};

inline RoleVoice default_voice(Role r) {
  switch (r) {
    case Role::melody: return {0, 80};
    case Role::piano: return {1, 0};
    case Role::guitar: return {2, 24};
    case Role::string: return {3, 48};
    case Role::bass: return {4, 33};
    case Role::drum: return {kDrumChannel, 0};
  }
  return {0, 0};
}

/// Builds a MidiPiece with one track per non-empty role. Note positions must
/// be representable at `ticks_per_quarter`.
inline MidiPiece to_midi_piece(const TrackSet& ts, int ticks_per_quarter = 480) {
  MidiPiece piece;
  piece.format = 1;
  piece.ticks_per_quarter = ticks_per_quarter;
  auto ticks = [&](Beats b) {
    Beats t = b * ticks_per_quarter;
    if (t.denominator() != 1) throw std::invalid_argument("note position not representable in ticks");
    return static_cast<std::uint64_t>(t.numerator());
  };
  piece.tempo_events.push_back({0, static_cast<std::uint32_t>(60'000'000.0 / ts.tempo_bpm + 0.5)});
  std::optional<TimeSignature> last;
  for (const auto& bar : ts.bars) {
    TimeSignature sig{static_cast<int>(bar.length.numerator()), 4 * static_cast<int>(bar.length.denominator())};
    // Prefer the smallest power-of-two denominator that expresses the bar.
    while (sig.denominator > 4 && sig.numerator % 2 == 0) {
      sig.numerator /= 2;
      sig.denominator /= 2;
    }
    if (!last || *last != sig) piece.time_signatures.push_back({ticks(bar.start), sig.numerator, sig.denominator});
    last = sig;
  }
  if (piece.time_signatures.empty()) piece.time_signatures.push_back({0, 4, 4});

  for (Role r : kRoles) {
    const auto& notes = ts.role(r);
    if (notes.empty()) continue;
    RoleVoice voice = default_voice(r);
    MidiTrack track;
    for (const auto& n : notes) {
      MidiNoteEvent on{ticks(n.onset), true, static_cast<std::uint8_t>(voice.channel),
                       static_cast<std::uint8_t>(n.pitch), static_cast<std::uint8_t>(std::clamp(n.velocity, 1, 127)),
                       static_cast<std::uint8_t>(voice.program)};
      MidiNoteEvent off = on;
      off.tick = ticks(n.onset + n.duration);
      off.on = false;
      off.velocity = 0;
      track.events.push_back(on);
      track.events.push_back(off);
    }
    std::stable_sort(track.events.begin(), track.events.end(), [](const MidiNoteEvent& a, const MidiNoteEvent& b) {
      return a.tick != b.tick ? a.tick < b.tick : (!a.on && b.on);
    });
    piece.tracks.push_back(std::move(track));
  }
  return piece;
}

}  // namespace museformer
