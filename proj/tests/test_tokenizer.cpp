#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "museformer/tokenizer.hpp"

using namespace museformer;

namespace {

int tok(TokenKind k, int v = 0) { return Vocabulary::id({k, v}); }

TrackSet random_quantized(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> bars(0, 6), per_bar(0, 5), pos(0, 15), dur(1, 16), pitch(21, 108),
      drum(0, 127);
  TrackSet ts;
  const int b = bars(rng);
  for (int i = 0; i < b; ++i) ts.bars.push_back({Beats(4 * i), Beats(4)});
  for (int i = 0; i < b; ++i) {
    for (Role r : kRoles) {
      const int n = per_bar(rng) / 2;
      for (int k = 0; k < n; ++k) {
        Note note;
        note.onset = Beats(4 * i) + Beats(pos(rng), 4);
        note.duration = Beats(dur(rng), 4);
        note.pitch = r == Role::drum ? drum(rng) : pitch(rng);
        ts.role(r).push_back(note);
      }
    }
  }
  for (auto& v : ts.notes) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  return ts;
}

}  // namespace

TEST(Vocabulary, LayoutAndInverse) {
  EXPECT_EQ(Vocabulary::size(), 306);
  for (int id = 0; id < Vocabulary::size(); ++id) EXPECT_EQ(Vocabulary::id(Vocabulary::token(id)), id);
  EXPECT_THROW(Vocabulary::token(Vocabulary::size()), std::out_of_range);
  std::set<std::string> names;
  for (int id = 0; id < Vocabulary::size(); ++id) names.insert(Vocabulary::name(id));
  EXPECT_EQ(names.size(), 306u);
}

TEST(Encode, SingleNote) {
  TrackSet ts;
  ts.bars.push_back({Beats(0), Beats(4)});
  ts.role(Role::melody).push_back({60, Beats(0), Beats(1), 80});
  TokenSeq seq = encode(ts);
  std::vector<int> expected{Vocabulary::kBos, Vocabulary::kBar, tok(TokenKind::track, 0), tok(TokenKind::pos, 0),
                            tok(TokenKind::pitch, 60), tok(TokenKind::dur, 4), Vocabulary::kSum, Vocabulary::kEos};
  EXPECT_EQ(seq.ids, expected);
  ASSERT_EQ(seq.bar_spans.size(), 1u);
  EXPECT_EQ(seq.bar_spans[0].begin, 1u);
  EXPECT_EQ(seq.bar_spans[0].end, 6u);
  EXPECT_EQ(seq.sum_positions[0], 6u);

  DecodeResult back = decode(seq);
  EXPECT_FALSE(back.error);
  EXPECT_EQ(back.tracks.role(Role::melody), ts.role(Role::melody));
}

TEST(Encode, EmptySong) {
  TokenSeq seq = encode(TrackSet{});
  EXPECT_EQ(seq.ids, (std::vector<int>{Vocabulary::kBos, Vocabulary::kEos}));
  EXPECT_TRUE(seq.bar_spans.empty());
}

TEST(Encode, SharedPositionWithinTrack) {
  TrackSet ts;
  ts.bars.push_back({Beats(0), Beats(4)});
  ts.role(Role::piano) = {{60, Beats(1), Beats(1), 80}, {64, Beats(1), Beats(1), 80}};
  TokenSeq seq = encode(ts);
  EXPECT_EQ(std::count(seq.ids.begin(), seq.ids.end(), tok(TokenKind::pos, 4)), 1);
  EXPECT_EQ(decode(seq).tracks.role(Role::piano), ts.role(Role::piano));
}

TEST(Encode, RejectsUnquantizedNote) {
  TrackSet ts;
  ts.bars.push_back({Beats(0), Beats(4)});
  ts.role(Role::piano) = {{60, Beats(1, 3), Beats(1), 80}};
  EXPECT_THROW(encode(ts), EncodeError);
}

TEST(Decode, RoundTripOnRandomTrackSets) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    TrackSet ts = random_quantized(rng);
    TokenSeq seq = encode(ts);
    DecodeResult back = decode(seq);
    ASSERT_FALSE(back.error) << trial;
    for (Role r : kRoles) ASSERT_EQ(back.tracks.role(r), ts.role(r)) << trial;
    ASSERT_EQ(back.tracks.bars, ts.bars) << trial;
    ASSERT_EQ(make_token_seq(seq.ids), seq) << trial;
  }
}

TEST(Decode, DanglingPitchIsTruncated) {
  std::vector<int> ids{Vocabulary::kBos,         Vocabulary::kBar,          tok(TokenKind::track, 0),
                       tok(TokenKind::pos, 0),   tok(TokenKind::pitch, 60), tok(TokenKind::dur, 2),
                       tok(TokenKind::pos, 4),   tok(TokenKind::pitch, 62), Vocabulary::kEos};
  DecodeResult r = decode(make_token_seq(ids));
  EXPECT_FALSE(r.error);
  EXPECT_TRUE(r.truncated);
  ASSERT_EQ(r.tracks.role(Role::melody).size(), 1u);
  EXPECT_EQ(r.tracks.role(Role::melody)[0].pitch, 60);
}

TEST(Decode, PitchBeforePositionIsAnError) {
  std::vector<int> ids{Vocabulary::kBos, Vocabulary::kBar, tok(TokenKind::track, 0), tok(TokenKind::pitch, 60),
                       tok(TokenKind::dur, 2), Vocabulary::kSum, Vocabulary::kEos};
  DecodeResult r = decode(make_token_seq(ids));
  ASSERT_TRUE(r.error);
  EXPECT_EQ(r.error->index, 3u);
}

TEST(Positions, BarAndBeatIds) {
  TrackSet ts;
  for (int b = 0; b < 4; ++b) ts.bars.push_back({Beats(4 * b), Beats(4)});
  ts.role(Role::melody) = {{60, Beats(2), Beats(1), 80}, {62, Beats(12), Beats(1), 80}};
  TokenSeq seq = encode(ts);
  PositionIndex idx = position_indices(seq);
  // SUM of bar 3.
  const std::size_t sum3 = seq.sum_positions[3];
  EXPECT_EQ(idx.bar_id[sum3], 3);
  EXPECT_EQ(idx.beat_id[sum3], idx.none);
  // PITCH after POS(8) in bar 0.
  const std::size_t pitch0 = seq.bar_spans[0].begin + 3;
  ASSERT_EQ(seq.ids[pitch0], tok(TokenKind::pitch, 60));
  EXPECT_EQ(idx.bar_id[pitch0], 0);
  EXPECT_EQ(idx.beat_id[pitch0], 8);
  EXPECT_EQ(idx.bar_id[0], 0);  // BOS
}

TEST(Corpus, WriteReadAndHashCheck) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "museformer_corpus_test";
  fs::create_directories(dir);
  std::mt19937_64 rng(2);
  std::vector<TokenSeq> songs;
  for (int i = 0; i < 5; ++i) songs.push_back(encode(random_quantized(rng)));
  write_corpus((dir / "c.tok").string(), (dir / "c.spans").string(), songs);
  EXPECT_EQ(read_corpus((dir / "c.tok").string(), (dir / "c.spans").string()), songs);

  {
    std::ofstream bad(dir / "bad.tok");
    bad << "# museformer-tokens v1 vocab=0000000000000000\n0 1\n";
  }
  EXPECT_THROW(read_corpus((dir / "bad.tok").string()), CorpusFormatError);
  fs::remove_all(dir);
}
