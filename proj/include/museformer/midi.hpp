#pragma once

// Standard MIDI File (format 0/1) reading and writing.
//
// Only the parts of the file needed downstream are kept: note on/off events
// (with the program active on their channel), tempo changes and time
// signatures. Sysex payloads and other meta events are skipped.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace museformer {

class MidiError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MidiNoteEvent {
  std::uint64_t tick = 0;
  bool on = false;
  std::uint8_t channel = 0;
  std::uint8_t pitch = 0;
  std::uint8_t velocity = 0;
  std::uint8_t program = 0;

  friend bool operator==(const MidiNoteEvent&, const MidiNoteEvent&) = default;
};

struct MidiTrack {
  std::vector<MidiNoteEvent> events;
};

struct TempoEvent {
  std::uint64_t tick = 0;
  std::uint32_t micros_per_quarter = 500000;

  double bpm() const { return 60'000'000.0 / static_cast<double>(micros_per_quarter); }
};

struct TimeSignatureEvent {
  std::uint64_t tick = 0;
  int numerator = 4;
  int denominator = 4;
};

struct MidiPiece {
  int format = 1;
  int ticks_per_quarter = 480;
  std::vector<MidiTrack> tracks;
  std::vector<TempoEvent> tempo_events;
  std::vector<TimeSignatureEvent> time_signatures;
  // Note-ons left open at end of track; each was closed at the track's last tick.
  int unbalanced_note_ons = 0;
};

namespace detail {

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  bool done() const { return pos_ >= data_.size(); }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint8_t peek() const {
    need(1);
    return data_[pos_];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>((data_[pos_] << 8) | data_[pos_ + 1]);
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = (std::uint32_t{data_[pos_]} << 24) | (std::uint32_t{data_[pos_ + 1]} << 16) |
                      (std::uint32_t{data_[pos_ + 2]} << 8) | std::uint32_t{data_[pos_ + 3]};
    pos_ += 4;
    return v;
  }
  std::uint32_t vlq() {
    std::uint32_t value = 0;
    for (int i = 0; i < 4; ++i) {
      std::uint8_t b = u8();
      value = (value << 7) | (b & 0x7F);
      if ((b & 0x80) == 0) return value;
    }
    throw MidiError("variable-length quantity longer than 4 bytes at offset " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  void skip(std::size_t n) { take(n); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) {
      throw MidiError("truncated data at offset " + std::to_string(pos_));
    }
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>((v >> shift) & 0xFF));
}

inline void put_vlq(std::vector<std::uint8_t>& out, std::uint32_t v) {
  std::array<std::uint8_t, 5> buf{};
  int n = 0;
  buf[n++] = static_cast<std::uint8_t>(v & 0x7F);
  while ((v >>= 7) != 0) buf[n++] = static_cast<std::uint8_t>((v & 0x7F) | 0x80);
  while (n > 0) out.push_back(buf[--n]);
}

// Pairs note-ons with note-offs FIFO per (channel, pitch). Stray note-offs
// are dropped; open note-ons are closed at end_tick. Returns the open count.
inline int balance_track(MidiTrack& track, std::uint64_t end_tick) {
  std::map<std::pair<int, int>, int> open;
  std::vector<MidiNoteEvent> kept;
  kept.reserve(track.events.size());
  for (const auto& ev : track.events) {
    auto key = std::make_pair(int{ev.channel}, int{ev.pitch});
    if (ev.on) {
      ++open[key];
      kept.push_back(ev);
    } else if (open[key] > 0) {
      --open[key];
      kept.push_back(ev);
    }
  }
  int unbalanced = 0;
  for (auto& [key, count] : open) {
    for (int i = 0; i < count; ++i) {
      MidiNoteEvent off;
      off.tick = end_tick;
      off.on = false;
      off.channel = static_cast<std::uint8_t>(key.first);
      off.pitch = static_cast<std::uint8_t>(key.second);
      kept.push_back(off);
      ++unbalanced;
    }
  }
  track.events = std::move(kept);
  return unbalanced;
}

inline MidiTrack parse_track(std::span<const std::uint8_t> body, MidiPiece& piece) {
  ByteReader in(body);
  MidiTrack track;
  std::uint64_t tick = 0;
  std::uint8_t running = 0;
  std::array<std::uint8_t, 16> program{};

  while (!in.done()) {
    tick += in.vlq();
    std::uint8_t status = in.peek();
    if (status & 0x80) {
      in.u8();
    } else {
      if (running == 0) throw MidiError("data byte without running status");
      status = running;
    }

    if (status == 0xFF) {
      std::uint8_t type = in.u8();
      std::uint32_t len = in.vlq();
      auto payload = in.take(len);
      if (type == 0x2F) break;
      if (type == 0x51 && len == 3) {
        std::uint32_t mpq = (std::uint32_t{payload[0]} << 16) | (std::uint32_t{payload[1]} << 8) | payload[2];
        if (mpq == 0) throw MidiError("tempo event with zero microseconds per quarter");
        piece.tempo_events.push_back({tick, mpq});
      } else if (type == 0x58 && len >= 2) {
        if (payload[1] > 6) throw MidiError("time signature denominator exponent out of range");
        piece.time_signatures.push_back({tick, payload[0], 1 << payload[1]});
      }
      continue;
    }
    if (status == 0xF0 || status == 0xF7) {
      in.skip(in.vlq());
      continue;
    }
    if (status >= 0xF0) throw MidiError("unsupported system message in track data");

    running = status;
    const std::uint8_t kind = status & 0xF0;
    const std::uint8_t channel = status & 0x0F;
    switch (kind) {
      case 0x80:
      case 0x90: {
        std::uint8_t pitch = in.u8() & 0x7F;
        std::uint8_t velocity = in.u8() & 0x7F;
        MidiNoteEvent ev;
        ev.tick = tick;
        ev.on = kind == 0x90 && velocity > 0;
        ev.channel = channel;
        ev.pitch = pitch;
        ev.velocity = ev.on ? velocity : 0;
        ev.program = program[channel];
        track.events.push_back(ev);
        break;
      }
      case 0xC0:
        program[channel] = in.u8() & 0x7F;
        break;
      case 0xD0:
        in.u8();
        break;
      default:  // 0xA0, 0xB0, 0xE0
        in.skip(2);
        break;
    }
  }
  piece.unbalanced_note_ons += balance_track(track, tick);
  return track;
}

}  // namespace detail

/// Decodes a Standard MIDI File. Running status is honoured and note-on with
/// velocity 0 is read as note-off. Ticks are kept exactly as stored.
inline MidiPiece parse_smf(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes);
  if (in.remaining() < 14) throw MidiError("malformed header: file too short");
  auto magic = in.take(4);
  if (!std::equal(magic.begin(), magic.end(), "MThd")) throw MidiError("malformed header: missing MThd");
  std::uint32_t header_len = in.u32();
  if (header_len < 6) throw MidiError("malformed header: length < 6");
  MidiPiece piece;
  piece.format = in.u16();
  std::uint16_t track_count = in.u16();
  std::uint16_t division = in.u16();
  in.skip(header_len - 6);
  if (piece.format > 1) throw MidiError("unsupported SMF format " + std::to_string(piece.format));
  if (division & 0x8000) throw MidiError("SMPTE time division is not supported");
  if (division == 0) throw MidiError("malformed header: zero ticks per quarter");
  piece.ticks_per_quarter = division;

  while (!in.done() && piece.tracks.size() < track_count) {
    if (in.remaining() < 8) throw MidiError("truncated chunk header");
    auto id = in.take(4);
    std::uint32_t len = in.u32();
    if (len > in.remaining()) throw MidiError("truncated chunk: declared " + std::to_string(len) + " bytes");
    auto body = in.take(len);
    if (std::equal(id.begin(), id.end(), "MTrk")) piece.tracks.push_back(detail::parse_track(body, piece));
  }
  if (piece.tracks.size() < track_count) throw MidiError("truncated file: missing MTrk chunks");

  auto by_tick = [](const auto& a, const auto& b) { return a.tick < b.tick; };
  std::stable_sort(piece.tempo_events.begin(), piece.tempo_events.end(), by_tick);
  std::stable_sort(piece.time_signatures.begin(), piece.time_signatures.end(), by_tick);
  return piece;
}

inline MidiPiece read_smf_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MidiError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_smf(bytes);
}

/// Writes a format-1 file: a conductor track holding tempo and time
/// signatures, then one MTrk per piece track. Program changes are emitted
/// whenever a channel's program differs from the last one written.
inline std::vector<std::uint8_t> write_smf(const MidiPiece& piece) {
  struct Timed {
    std::uint64_t tick;
    int order;
    std::vector<std::uint8_t> bytes;
  };
  auto emit_track = [](std::vector<std::uint8_t>& out, std::vector<Timed> events) {
    std::stable_sort(events.begin(), events.end(), [](const Timed& a, const Timed& b) {
      return a.tick != b.tick ? a.tick < b.tick : a.order < b.order;
    });
    std::vector<std::uint8_t> body;
    std::uint64_t last = 0;
    for (const auto& ev : events) {
      detail::put_vlq(body, static_cast<std::uint32_t>(ev.tick - last));
      last = ev.tick;
      body.insert(body.end(), ev.bytes.begin(), ev.bytes.end());
    }
    body.insert(body.end(), {0x00, 0xFF, 0x2F, 0x00});
    out.insert(out.end(), {'M', 'T', 'r', 'k'});
    detail::put_u32(out, static_cast<std::uint32_t>(body.size()));
    out.insert(out.end(), body.begin(), body.end());
  };

  std::vector<std::uint8_t> out{'M', 'T', 'h', 'd'};
  detail::put_u32(out, 6);
  detail::put_u16(out, 1);
  detail::put_u16(out, static_cast<std::uint16_t>(piece.tracks.size() + 1));
  detail::put_u16(out, static_cast<std::uint16_t>(piece.ticks_per_quarter));

  std::vector<Timed> conductor;
  for (const auto& t : piece.tempo_events) {
    std::uint32_t m = t.micros_per_quarter;
    conductor.push_back({t.tick, 0,
                         {0xFF, 0x51, 0x03, static_cast<std::uint8_t>(m >> 16),
                          static_cast<std::uint8_t>((m >> 8) & 0xFF), static_cast<std::uint8_t>(m & 0xFF)}});
  }
  for (const auto& ts : piece.time_signatures) {
    std::uint8_t exponent = 0;
    while ((1 << exponent) < ts.denominator) ++exponent;
    conductor.push_back({ts.tick, 0,
                         {0xFF, 0x58, 0x04, static_cast<std::uint8_t>(ts.numerator), exponent, 24, 8}});
  }
  emit_track(out, std::move(conductor));

  for (const auto& track : piece.tracks) {
    std::vector<Timed> events;
    std::array<int, 16> current_program;
    current_program.fill(-1);
    for (const auto& ev : track.events) {
      if (ev.on && current_program[ev.channel] != ev.program) {
        current_program[ev.channel] = ev.program;
        events.push_back({ev.tick, 1, {static_cast<std::uint8_t>(0xC0 | ev.channel), ev.program}});
      }
      std::uint8_t status = static_cast<std::uint8_t>((ev.on ? 0x90 : 0x80) | ev.channel);
      // Offs sort before program changes and ons sharing the same tick.
      events.push_back({ev.tick, ev.on ? 2 : 0, {status, ev.pitch, ev.on ? ev.velocity : std::uint8_t{0}}});
    }
    emit_track(out, std::move(events));
  }
  return out;
}

}  // namespace museformer
