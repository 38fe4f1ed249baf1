#pragma once

// REMI-style event tokens with a summary token closing every bar.
//
// Serialization per bar: BAR, then for each non-empty role in canonical order
// TRACK(role) followed by POS PITCH DUR triples sorted by (pos, pitch, dur).
// POS is omitted when it repeats the previous note's position in the same
// track. SUM closes the bar; BOS/EOS wrap the song.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "museformer/tracks.hpp"

namespace museformer {

enum class TokenKind : std::uint8_t { bos, eos, sum, bar, track, pos, pitch, drum_pitch, dur };

struct Token {
  TokenKind kind = TokenKind::bos;
  int value = 0;

  friend bool operator==(const Token&, const Token&) = default;
};

/// Fixed token-id layout. Melodic pitches span 21..108, drum pitches keep the
/// full 0..127 percussion map, durations count grid units 1..64.
struct Vocabulary {
  static constexpr int kPositionsPerBar = 16;
  static constexpr int kMinPitch = 21;
  static constexpr int kMaxPitch = 108;
  static constexpr int kDrumPitches = 128;
  static constexpr int kMaxDuration = 64;

  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kSum = 2;
  static constexpr int kBar = 3;
  static constexpr int kTrackBase = 4;
  static constexpr int kPosBase = kTrackBase + static_cast<int>(kRoleCount);
  static constexpr int kPitchBase = kPosBase + kPositionsPerBar;
  static constexpr int kDrumBase = kPitchBase + (kMaxPitch - kMinPitch + 1);
  static constexpr int kDurBase = kDrumBase + kDrumPitches;
  static constexpr int kSize = kDurBase + kMaxDuration;

  static constexpr int size() { return kSize; }

  static int id(Token t) {
    switch (t.kind) {
      case TokenKind::bos: return kBos;
      case TokenKind::eos: return kEos;
      case TokenKind::sum: return kSum;
      case TokenKind::bar: return kBar;
      case TokenKind::track:
        check(t.value >= 0 && t.value < static_cast<int>(kRoleCount), "track role");
        return kTrackBase + t.value;
      case TokenKind::pos:
        check(t.value >= 0 && t.value < kPositionsPerBar, "position");
        return kPosBase + t.value;
      case TokenKind::pitch:
        check(t.value >= kMinPitch && t.value <= kMaxPitch, "pitch");
        return kPitchBase + t.value - kMinPitch;
      case TokenKind::drum_pitch:
        check(t.value >= 0 && t.value < kDrumPitches, "drum pitch");
        return kDrumBase + t.value;
      case TokenKind::dur:
        check(t.value >= 1 && t.value <= kMaxDuration, "duration");
        return kDurBase + t.value - 1;
    }
    throw std::invalid_argument("unknown token kind");
  }

  static Token token(int id) {
    if (id < 0 || id >= kSize) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
    if (id == kBos) return {TokenKind::bos, 0};
    if (id == kEos) return {TokenKind::eos, 0};
    if (id == kSum) return {TokenKind::sum, 0};
    if (id == kBar) return {TokenKind::bar, 0};
    if (id < kPosBase) return {TokenKind::track, id - kTrackBase};
    if (id < kPitchBase) return {TokenKind::pos, id - kPosBase};
    if (id < kDrumBase) return {TokenKind::pitch, id - kPitchBase + kMinPitch};
    if (id < kDurBase) return {TokenKind::drum_pitch, id - kDrumBase};
    return {TokenKind::dur, id - kDurBase + 1};
  }

  static std::string name(int id) {
    Token t = token(id);
    switch (t.kind) {
      case TokenKind::bos: return "BOS";
      case TokenKind::eos: return "EOS";
      case TokenKind::sum: return "SUM";
      case TokenKind::bar: return "BAR";
      case TokenKind::track: return "TRACK(" + std::string(role_name(static_cast<Role>(t.value))) + ")";
      case TokenKind::pos: return "POS(" + std::to_string(t.value) + ")";
      case TokenKind::pitch: return "PITCH(" + std::to_string(t.value) + ")";
      case TokenKind::drum_pitch: return "DRUM(" + std::to_string(t.value) + ")";
      case TokenKind::dur: return "DUR(" + std::to_string(t.value) + ")";
    }
    return "?";
  }

  static nlohmann::ordered_json to_json() {
    nlohmann::ordered_json j;
    j["format"] = "museformer-vocab";
    j["version"] = 1;
    j["positions_per_bar"] = kPositionsPerBar;
    j["size"] = kSize;
    nlohmann::ordered_json tokens = nlohmann::ordered_json::array();
    for (int i = 0; i < kSize; ++i) tokens.push_back(name(i));
    j["tokens"] = tokens;
    return j;
  }

  /// FNV-1a over the canonical vocab.json text.
  static std::uint64_t hash() {
    static const std::uint64_t h = [] {
      std::string text = to_json().dump();
      std::uint64_t v = 1469598103934665603ULL;
      for (unsigned char c : text) {
        v ^= c;
        v *= 1099511628211ULL;
      }
      return v;
    }();
    return h;
  }

 private:
  static void check(bool ok, const char* what) {
    if (!ok) throw std::out_of_range(std::string("token value outside vocabulary: ") + what);
  }
};

struct BarSpan {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive

  std::size_t size() const { return end - begin; }
  friend bool operator==(const BarSpan&, const BarSpan&) = default;
};

/// Token ids with per-bar spans (music tokens only) and the index of each
/// bar's SUM token, which directly follows its span.
struct TokenSeq {
  std::vector<int> ids;
  std::vector<BarSpan> bar_spans;
  std::vector<std::size_t> sum_positions;

  std::size_t bar_count() const { return bar_spans.size(); }
  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

struct TokenizerConfig {
  Beats grid{1, 4};
  int positions_per_bar = Vocabulary::kPositionsPerBar;
};

class EncodeError : public std::runtime_error {
 public:
  EncodeError(Role role, std::size_t note_index, const std::string& what)
      : std::runtime_error("encode: " + std::string(role_name(role)) + " note " + std::to_string(note_index) + ": " +
                           what),
        role_(role),
        note_index_(note_index) {}

  Role role() const { return role_; }
  std::size_t note_index() const { return note_index_; }

 private:
  Role role_;
  std::size_t note_index_;
};

/// Recomputes bar spans and SUM positions from the BAR/SUM tokens in `ids`.
/// A bar's span runs from its BAR token to the token before its SUM (or the
/// next BAR/EOS when the SUM is missing).
inline TokenSeq make_token_seq(std::vector<int> ids) {
  TokenSeq seq;
  seq.ids = std::move(ids);
  std::optional<std::size_t> open;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    int id = seq.ids[i];
    if (id == Vocabulary::kBar) {
      if (open) {
        seq.bar_spans.push_back({*open, i});
        seq.sum_positions.push_back(i);  // missing SUM: points at next bar start
      }
      open = i;
    } else if (id == Vocabulary::kSum && open) {
      seq.bar_spans.push_back({*open, i});
      seq.sum_positions.push_back(i);
      open.reset();
    } else if (id == Vocabulary::kEos && open) {
      seq.bar_spans.push_back({*open, i});
      seq.sum_positions.push_back(i);
      open.reset();
    }
  }
  if (open) {
    seq.bar_spans.push_back({*open, seq.ids.size()});
    seq.sum_positions.push_back(seq.ids.size());
  }
  return seq;
}

/// Grid-unit position and duration of a note inside its bar.
struct NoteCell {
  int position;
  int pitch;
  int duration;

  friend auto operator<=>(const NoteCell&, const NoteCell&) = default;
};

/// Per bar, per role, the sorted list of note cells. Notes outside every bar
/// or off the grid raise EncodeError.
inline std::vector<std::array<std::vector<NoteCell>, kRoleCount>> bar_note_table(const TrackSet& ts,
                                                                                  const TokenizerConfig& cfg = {}) {
  std::vector<std::array<std::vector<NoteCell>, kRoleCount>> table(ts.bars.size());
  for (Role r : kRoles) {
    const auto& notes = ts.role(r);
    for (std::size_t i = 0; i < notes.size(); ++i) {
      const Note& n = notes[i];
      auto bar = ts.bar_of(n.onset);
      if (!bar) throw EncodeError(r, i, "onset outside every bar");
      Beats pos = (n.onset - ts.bars[*bar].start) / cfg.grid;
      Beats dur = n.duration / cfg.grid;
      if (pos.denominator() != 1 || dur.denominator() != 1) throw EncodeError(r, i, "not quantized to the grid");
      if (pos.numerator() >= cfg.positions_per_bar) throw EncodeError(r, i, "position outside vocabulary");
      if (dur.numerator() < 1 || dur.numerator() > Vocabulary::kMaxDuration)
        throw EncodeError(r, i, "duration outside vocabulary");
      bool drum = r == Role::drum;
      if (drum ? (n.pitch < 0 || n.pitch >= Vocabulary::kDrumPitches)
               : (n.pitch < Vocabulary::kMinPitch || n.pitch > Vocabulary::kMaxPitch))
        throw EncodeError(r, i, "pitch outside vocabulary");
      table[*bar][role_index(r)].push_back(
          {static_cast<int>(pos.numerator()), n.pitch, static_cast<int>(dur.numerator())});
    }
  }
  for (auto& bar : table)
    for (auto& cells : bar) std::sort(cells.begin(), cells.end());
  return table;
}

inline TokenSeq encode(const TrackSet& ts, const TokenizerConfig& cfg = {}) {
  auto table = bar_note_table(ts, cfg);
  TokenSeq seq;
  seq.ids.push_back(Vocabulary::kBos);
  for (const auto& bar : table) {
    std::size_t begin = seq.ids.size();
    seq.ids.push_back(Vocabulary::kBar);
    for (Role r : kRoles) {
      const auto& cells = bar[role_index(r)];
      if (cells.empty()) continue;
      seq.ids.push_back(Vocabulary::id({TokenKind::track, static_cast<int>(role_index(r))}));
      int last_pos = -1;
      for (const auto& c : cells) {
        if (c.position != last_pos) seq.ids.push_back(Vocabulary::id({TokenKind::pos, c.position}));
        last_pos = c.position;
        TokenKind pk = r == Role::drum ? TokenKind::drum_pitch : TokenKind::pitch;
        seq.ids.push_back(Vocabulary::id({pk, c.pitch}));
        seq.ids.push_back(Vocabulary::id({TokenKind::dur, c.duration}));
      }
    }
    seq.bar_spans.push_back({begin, seq.ids.size()});
    seq.sum_positions.push_back(seq.ids.size());
    seq.ids.push_back(Vocabulary::kSum);
  }
  seq.ids.push_back(Vocabulary::kEos);
  return seq;
}

struct GrammarError {
  std::size_t index = 0;
  std::string message;
};

struct DecodeResult {
  TrackSet tracks;
  std::optional<GrammarError> error;
  // A trailing incomplete note was dropped.
  bool truncated = false;
};

/// Parses token ids back into a TrackSet of 4/4-style bars of
/// positions_per_bar grid units. On a grammar violation the result keeps the
/// bars completed before the offending bar and reports the violating index.
inline DecodeResult decode(const TokenSeq& seq, const TokenizerConfig& cfg = {}) {
  DecodeResult result;
  TrackSet& out = result.tracks;
  const Beats bar_length = cfg.grid * cfg.positions_per_bar;

  struct Pending {
    Role role;
    int pitch;
  };
  std::array<std::vector<Note>, kRoleCount> bar_notes;
  bool bar_open = false;
  std::optional<Role> track;
  std::optional<int> position;
  std::optional<Pending> pending;

  auto commit_bar = [&] {
    Beats start = bar_length * static_cast<std::int64_t>(out.bars.size());
    out.bars.push_back({start, bar_length});
    for (std::size_t r = 0; r < kRoleCount; ++r) {
      for (auto n : bar_notes[r]) {
        n.onset += start;
        out.notes[r].push_back(n);
      }
      bar_notes[r].clear();
    }
    bar_open = false;
    track.reset();
    position.reset();
  };
  auto fail = [&](std::size_t i, std::string msg) {
    result.error = GrammarError{i, std::move(msg)};
    for (auto& v : bar_notes) v.clear();
  };

  const auto& ids = seq.ids;
  if (ids.empty() || ids.front() != Vocabulary::kBos) {
    fail(0, "sequence must start with BOS");
    return result;
  }
  bool ended = false;
  for (std::size_t i = 1; i < ids.size() && !ended; ++i) {
    Token t;
    try {
      t = Vocabulary::token(ids[i]);
    } catch (const std::out_of_range&) {
      fail(i, "token id outside vocabulary");
      return result;
    }
    if (pending && t.kind != TokenKind::dur && t.kind != TokenKind::eos) {
      fail(i, "expected DUR after PITCH");
      return result;
    }
    switch (t.kind) {
      case TokenKind::bos:
        fail(i, "BOS inside sequence");
        return result;
      case TokenKind::eos:
        ended = true;
        break;
      case TokenKind::bar:
        if (bar_open) commit_bar();
        bar_open = true;
        break;
      case TokenKind::sum:
        if (!bar_open) {
          fail(i, "SUM outside a bar");
          return result;
        }
        commit_bar();
        break;
      case TokenKind::track:
        if (!bar_open) {
          fail(i, "TRACK outside a bar");
          return result;
        }
        track = static_cast<Role>(t.value);
        position.reset();
        break;
      case TokenKind::pos:
        if (!track) {
          fail(i, "POS before TRACK");
          return result;
        }
        if (t.value >= cfg.positions_per_bar) {
          fail(i, "POS outside bar");
          return result;
        }
        position = t.value;
        break;
      case TokenKind::pitch:
      case TokenKind::drum_pitch:
        if (!position) {
          fail(i, "PITCH before POS");
          return result;
        }
        if ((*track == Role::drum) != (t.kind == TokenKind::drum_pitch)) {
          fail(i, "pitch kind does not match track");
          return result;
        }
        pending = Pending{*track, t.value};
        break;
      case TokenKind::dur:
        if (!pending) {
          fail(i, "DUR without PITCH");
          return result;
        }
        bar_notes[role_index(pending->role)].push_back(
            {pending->pitch, cfg.grid * *position, cfg.grid * t.value, 80});
        pending.reset();
        break;
    }
  }
  if (pending) {
    result.truncated = true;
    pending.reset();
  }
  if (bar_open) commit_bar();
  for (auto& v : out.notes) std::stable_sort(v.begin(), v.end());
  return result;
}

/// Bar id and beat bucket for every token. Structural tokens (and SUM) use
/// the NONE bucket, equal to positions_per_bar.
struct PositionIndex {
  std::vector<int> bar_id;
  std::vector<int> beat_id;
  int none = Vocabulary::kPositionsPerBar;
};

/// Running (bar, beat) state; feed tokens in order.
class PositionTracker {
 public:
  explicit PositionTracker(int positions_per_bar = Vocabulary::kPositionsPerBar) : none_(positions_per_bar) {}

  int none() const { return none_; }
  int bars_started() const { return bars_started_; }

  /// Returns (bar_id, beat_id) for the next token. The first BAR joins bar 0
  /// together with BOS; every later BAR opens a new bar.
  std::pair<int, int> next(int id) {
    Token t = Vocabulary::token(id);
    switch (t.kind) {
      case TokenKind::bar:
        if (bars_started_ > 0) ++bar_;
        ++bars_started_;
        position_.reset();
        return {bar_, none_};
      case TokenKind::track:
        position_.reset();
        return {bar_, none_};
      case TokenKind::pos:
        position_ = t.value;
        return {bar_, t.value};
      case TokenKind::pitch:
      case TokenKind::drum_pitch:
      case TokenKind::dur:
        return {bar_, position_.value_or(none_)};
      default:
        return {bar_, none_};
    }
  }

 private:
  int none_;
  int bar_ = 0;
  int bars_started_ = 0;
  std::optional<int> position_;
};

inline PositionIndex position_indices(const TokenSeq& seq, int positions_per_bar = Vocabulary::kPositionsPerBar) {
  PositionIndex idx;
  idx.none = positions_per_bar;
  PositionTracker tracker(positions_per_bar);
  idx.bar_id.reserve(seq.ids.size());
  idx.beat_id.reserve(seq.ids.size());
  for (int id : seq.ids) {
    auto [bar, beat] = tracker.next(id);
    idx.bar_id.push_back(bar);
    idx.beat_id.push_back(beat);
  }
  return idx;
}

// ---------------------------------------------------------------------------
// Corpus files: one song per line of token ids, plus a sidecar with
// `begin:end:sum` triples per bar.

class CorpusFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string hash_hex(std::uint64_t h) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << h;
  return s.str();
}

inline void write_corpus(const std::string& tokens_path, const std::string& spans_path,
                         const std::vector<TokenSeq>& songs) {
  std::ofstream tok(tokens_path), spans(spans_path);
  if (!tok || !spans) throw CorpusFormatError("cannot write corpus files");
  const std::string vocab = hash_hex(Vocabulary::hash());
  tok << "# museformer-tokens v1 vocab=" << vocab << "\n";
  spans << "# museformer-spans v1 vocab=" << vocab << "\n";
  for (const auto& s : songs) {
    for (std::size_t i = 0; i < s.ids.size(); ++i) tok << (i ? " " : "") << s.ids[i];
    tok << "\n";
    for (std::size_t b = 0; b < s.bar_spans.size(); ++b)
      spans << (b ? " " : "") << s.bar_spans[b].begin << ":" << s.bar_spans[b].end << ":" << s.sum_positions[b];
    spans << "\n";
  }
}

namespace detail {

inline std::string read_header(std::istream& in, const std::string& kind, const std::string& path) {
  std::string header;
  if (!std::getline(in, header)) throw CorpusFormatError(path + ": empty file");
  const std::string prefix = "# museformer-" + kind + " v1 vocab=";
  if (header.rfind(prefix, 0) != 0) throw CorpusFormatError(path + ": missing museformer-" + kind + " header");
  return header.substr(prefix.size());
}

}  // namespace detail

/// Reads a token corpus. The sidecar is optional; when present its spans must
/// agree with the ones implied by the token ids.
inline std::vector<TokenSeq> read_corpus(const std::string& tokens_path, const std::string& spans_path = "") {
  std::ifstream tok(tokens_path);
  if (!tok) throw CorpusFormatError("cannot open " + tokens_path);
  std::string vocab = detail::read_header(tok, "tokens", tokens_path);
  if (vocab != hash_hex(Vocabulary::hash()))
    throw CorpusFormatError(tokens_path + ": vocabulary hash mismatch (file " + vocab + ")");
  std::vector<TokenSeq> songs;
  std::string line;
  while (std::getline(tok, line)) {
    std::istringstream ls(line);
    std::vector<int> ids;
    int id;
    while (ls >> id) ids.push_back(id);
    if (!ls.eof()) throw CorpusFormatError(tokens_path + ": non-integer token on line " + std::to_string(songs.size() + 2));
    songs.push_back(make_token_seq(std::move(ids)));
  }
  if (spans_path.empty()) return songs;

  std::ifstream sp(spans_path);
  if (!sp) throw CorpusFormatError("cannot open " + spans_path);
  if (detail::read_header(sp, "spans", spans_path) != vocab)
    throw CorpusFormatError(spans_path + ": vocabulary hash differs from token file");
  std::size_t song = 0;
  while (std::getline(sp, line)) {
    if (song >= songs.size()) throw CorpusFormatError(spans_path + ": more lines than songs");
    std::istringstream ls(line);
    std::string triple;
    std::vector<BarSpan> spans;
    std::vector<std::size_t> sums;
    while (ls >> triple) {
      std::size_t b = 0, e = 0, s = 0;
      char c1 = 0, c2 = 0;
      std::istringstream ts(triple);
      if (!(ts >> b >> c1 >> e >> c2 >> s) || c1 != ':' || c2 != ':')
        throw CorpusFormatError(spans_path + ": malformed span " + triple);
      spans.push_back({b, e});
      sums.push_back(s);
    }
    if (spans != songs[song].bar_spans || sums != songs[song].sum_positions)
      throw CorpusFormatError(spans_path + ": spans disagree with tokens for song " + std::to_string(song));
    ++song;
  }
  if (song != songs.size()) throw CorpusFormatError(spans_path + ": fewer lines than songs");
  return songs;
}

}  // namespace museformer
