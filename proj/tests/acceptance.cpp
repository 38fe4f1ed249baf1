// Acceptance criteria, one PASS/FAIL line each.
//
//   acceptance                 run every criterion
//   acceptance --criterion 7a  run one
//
// Exit status is 0 only when every selected criterion passes.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "museformer/museformer.hpp"
#include "oracles/dense_reference.hpp"
#include "oracles/similarity_reference.hpp"

namespace fs = std::filesystem;
using namespace museformer;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int precision = 3) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

Matrix<double> random_states(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index d) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix<double> m(rows, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

oracle::MaskOptions mask_options(const LayoutSpec& spec) {
  return {spec.selection.offsets(), spec.coarse, spec.include_related_summaries};
}

BoolLayout from_rows(const std::vector<std::string>& rows) {
  BoolLayout l(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      if (rows[r][c] == '1') l.set(r, c);
  return l;
}

std::vector<TokenSeq> encode_all(const std::vector<TrackSet>& pieces) {
  std::vector<TokenSeq> out;
  for (const auto& ts : pieces) out.push_back(encode(ts));
  return out;
}

std::vector<ModelSequence> model_sequences(const std::vector<TokenSeq>& songs, int max_bars) {
  std::vector<ModelSequence> out;
  for (const auto& s : songs) out.push_back(to_model_sequence(s, max_bars));
  return out;
}

struct Shell {
  int code = -1;
  std::string out;
};

Shell run_cli(const std::string& args, const fs::path& scratch) {
  const fs::path out = scratch / "cli_stdout.txt";
  const std::string cmd = std::string("\"") + MUSEFORMER_CLI + "\" " + args + " > \"" + out.string() + "\"";
  const int status = std::system(cmd.c_str());
  Shell r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out);
  std::ostringstream s;
  s << in.rdbuf();
  r.out = s.str();
  return r;
}

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("museformer_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------------------

Outcome criterion_1() {
  Stopwatch clock;
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<int> bars(1, 8), len(1, 12), heads(1, 4), sel(0, 4), off(1, 8), flag(0, 1);
  const int configs = 240;
  double worst = 0;
  for (int trial = 0; trial < configs; ++trial) {
    LayoutSpec spec;
    for (int b = bars(rng); b > 0; --b) spec.bar_lengths.push_back(len(rng));
    std::vector<int> offsets;
    for (int k = sel(rng); k > 0; --k) offsets.push_back(off(rng));
    spec.selection = BarSelection(offsets);
    spec.coarse = flag(rng);
    spec.include_related_summaries = flag(rng);
    const int h = heads(rng);
    // d <= 32 and divisible by the head count.
    const Eigen::Index d = h * std::uniform_int_distribution<int>(1, 32 / h)(rng);
    auto bundle = LayoutBundle::build(spec);
    auto X = random_states(rng, static_cast<Eigen::Index>(spec.total()), d);
    auto p = LayerParams<double>::zeros(d, 2 * d);
    oracle::randomize(p, rng, 0.5);
    const bool pre = flag(rng);
    LayerOptions opt;
    opt.heads = h;
    opt.norm = pre ? NormPlacement::pre : NormPlacement::post;
    auto got = fc_layer_forward(X, bundle, p, opt);
    auto want = oracle::layer(X, oracle::Geometry::from_lengths(spec.bar_lengths), mask_options(spec), p, h, pre);
    worst = std::max(worst, oracle::max_rel_error(got, want));
  }
  const double secs = clock.seconds();
  return {worst <= 1e-6 && secs < 60.0, "FC-attention layer vs dense masked reference: max rel err " + fmt(worst) +
                                            " (tol 1e-6) over " + std::to_string(configs) + " configs, " +
                                            fmt(secs) + " s (limit 60 s)"};
}

Outcome criterion_2() {
  std::mt19937_64 rng(1002);
  std::uniform_int_distribution<int> bars(1, 40), len(0, 12), sel(0, 6), off(1, 16), flag(0, 1);
  int suites = 0;
  std::size_t cells = 0, mismatches = 0;
  while (suites < 400) {
    LayoutSpec spec;
    for (int b = bars(rng); b > 0; --b) spec.bar_lengths.push_back(len(rng));
    if (spec.total() > 300) continue;
    std::vector<int> offsets;
    for (int k = sel(rng); k > 0; --k) offsets.push_back(off(rng));
    spec.selection = BarSelection(offsets);
    spec.coarse = flag(rng);
    spec.include_related_summaries = flag(rng);
    ++suites;
    const auto g = oracle::Geometry::from_lengths(spec.bar_lengths);
    const auto o = mask_options(spec);
    const BoolLayout s = build_summary_layout(spec), a = build_aggregation_layout(spec);
    for (int r = 0; r < g.bars; ++r)
      for (int c = 0; c < g.total(); ++c, ++cells)
        mismatches += s.allowed(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) != oracle::summary_allows(g, r, c);
    for (int q = 0; q < g.music(); ++q)
      for (int c = 0; c < g.total(); ++c, ++cells)
        mismatches +=
            a.allowed(static_cast<std::size_t>(q), static_cast<std::size_t>(c)) != oracle::music_allows(g, o, q, c);
  }

  // Three bars of two tokens with only the previous bar structure-related,
  // summary-first: s1 s2 s3 x11 x12 x21 x22 x31 x32.
  LayoutSpec toy;
  toy.bar_lengths = {2, 2, 2};
  toy.selection = BarSelection{1};
  const BoolLayout toy_expected = from_rows({"100110000", "010001100", "001000011", "000100000", "000110000",
                                             "000111000", "000111100", "100001110", "100001111"});
  const bool toy_ok = build_combined_layout(toy) == toy_expected;
  const std::vector<std::pair<std::size_t, std::size_t>> blocks_expected{
      {0, 0}, {0, 1}, {0, 2}, {0, 3}, {1, 1}, {1, 3}, {1, 4}, {2, 1}, {2, 2},
      {3, 0}, {3, 1}, {3, 2}, {3, 3}, {4, 0}, {4, 2}, {4, 3}, {4, 4}};
  const bool blocks_ok = blocksparsify(toy_expected, 2).kept_blocks == blocks_expected;

  return {mismatches == 0 && toy_ok && blocks_ok,
          "layout vs per-cell predicates: " + std::to_string(mismatches) + " mismatches in " + std::to_string(cells) +
              " cells over " + std::to_string(suites) + " sequences <= 300 tokens; toy layout " +
              (toy_ok ? "exact" : "differs") + "; toy blocks " + (blocks_ok ? "exact" : "differ")};
}

ModelConfig desk_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.ffn_hidden = 32;
  c.max_bars = 32;
  c.selection = BarSelection{1, 2, 4};
  return c;
}

Outcome criterion_3() {
  std::mt19937_64 rng(1003);
  const ModelConfig c = desk_config();
  const auto params = init_params<double>(c, 3);
  SyntheticOptions opt;
  std::uniform_int_distribution<int> tokens(0, Vocabulary::size() - 1);
  int triples = 0;
  double worst = 0;
  while (triples < 1000) {
    opt.bars = std::uniform_int_distribution<int>(2, 10)(rng);
    const ModelSequence seq = to_model_sequence(encode(periodic_song(opt, rng)), c.max_bars);
    const Matrix<double> base = forward(params, c, seq);
    for (int k = 0; k < 25 && triples < 1000; ++k, ++triples) {
      const std::size_t pos = std::uniform_int_distribution<std::size_t>(0, seq.size() - 2)(rng);
      const std::size_t edit = std::uniform_int_distribution<std::size_t>(pos + 1, seq.size() - 1)(rng);
      ModelSequence alt = seq;
      int id = tokens(rng);
      while (id == Vocabulary::kSum || id == alt.inputs[edit]) id = tokens(rng);
      alt.inputs[edit] = id;
      const Matrix<double> moved = forward(params, c, alt);
      const auto rows = static_cast<Eigen::Index>(pos + 1);
      worst = std::max(worst, (moved.topRows(rows) - base.topRows(rows)).cwiseAbs().maxCoeff());
    }
  }
  return {worst == 0.0, "max |change| at or before the position over " + std::to_string(triples) +
                            " (sequence, position, future edit) triples: " + fmt(worst) + " (must be exactly 0)"};
}

Outcome criterion_4() {
  std::mt19937_64 rng(1004);
  std::uniform_int_distribution<int> bars(3, 12), len(1, 6), flag(0, 1);
  int checks = 0;
  double worst = 0;
  for (int trial = 0; trial < 300; ++trial) {
    LayoutSpec spec;
    for (int b = bars(rng); b > 0; --b) spec.bar_lengths.push_back(len(rng));
    spec.selection = BarSelection{1, 2, 4};
    spec.coarse = false;
    const auto bundle = LayoutBundle::build(spec);
    const LayoutGeometry g(spec);
    const Eigen::Index d = 8;
    auto X = random_states(rng, static_cast<Eigen::Index>(spec.total()), d);
    auto p = LayerParams<double>::zeros(d, 16);
    oracle::randomize(p, rng, 0.5);
    LayerOptions opt;
    opt.heads = 2;
    opt.norm = flag(rng) ? NormPlacement::pre : NormPlacement::post;
    const Matrix<double> base = fc_layer_forward(X, bundle, p, opt);
    // Query: last token. Edit one token of every unrelated previous bar.
    const std::size_t q = g.music() - 1;
    const std::size_t qbar = g.bar_of(q);
    auto Y = X;
    bool edited = false;
    for (std::size_t b = 0; b < qbar; ++b) {
      if (spec.selection.contains(static_cast<int>(qbar - b))) continue;
      Y.row(static_cast<Eigen::Index>(g.bars() + g.bar_begin(b))).array() += 3.0;
      edited = true;
    }
    if (!edited) continue;
    const Matrix<double> moved = fc_layer_forward(Y, bundle, p, opt);
    const auto row = static_cast<Eigen::Index>(g.bars() + q);
    worst = std::max(worst, (moved.row(row) - base.row(row)).cwiseAbs().maxCoeff());
    ++checks;
  }
  return {worst == 0.0 && checks > 100, "coarse disabled: max |change| of the query output after editing unrelated bars: " +
                                            fmt(worst) + " over " + std::to_string(checks) +
                                            " edits (must be exactly 0)"};
}

Outcome criterion_5() {
  std::string worst_group;
  double worst = 0;
  for (NormPlacement norm : {NormPlacement::pre, NormPlacement::post}) {
    ModelConfig c = desk_config();
    c.d_model = 8;
    c.ffn_hidden = 16;
    c.norm = norm;
    auto p = init_params<double>(c, 5);
    SyntheticOptions opt;
    opt.bars = 5;
    std::mt19937_64 rng(1005);
    const ModelSequence seq = to_model_sequence(encode(periodic_song(opt, rng)), c.max_bars);
    auto g = ModelParams<double>::zeros(c);
    g.for_each([](const std::string&, Matrix<double>& m) { m.setZero(); });
    loss_and_gradient(p, c, seq, g);
    auto loss = [&] { return nll_loss(forward(p, c, seq), std::span<const int>(seq.targets)); };
    GradCheckOptions gopt;
    gopt.eps = 1e-5;
    gopt.samples_per_group = 16;
    gopt.seed = 7;
    const auto result = grad_check(p, g, loss, gopt);
    for (const auto& group : result.groups)
      if (group.max_rel_error >= worst) {
        worst = group.max_rel_error;
        worst_group = group.name + (norm == NormPlacement::pre ? " (pre-norm)" : " (post-norm)");
      }
  }
  return {worst < 1e-3, "2-layer model, central differences eps 1e-5: max rel err " + fmt(worst) + " in " +
                            worst_group + " (tol 1e-3)"};
}

Outcome criterion_6() {
  // Every pair of subsets of a 6-note universe.
  std::vector<NoteKey> universe;
  for (int i = 0; i < 6; ++i) universe.push_back({0, 60 + i, 1 + i % 2, i});
  std::size_t jaccard_bad = 0;
  for (int a = 0; a < 64; ++a)
    for (int b = 0; b < 64; ++b) {
      std::vector<NoteKey> ka, kb;
      for (int i = 0; i < 6; ++i) {
        if (a >> i & 1) ka.push_back(universe[static_cast<std::size_t>(i)]);
        if (b >> i & 1) kb.push_back(universe[static_cast<std::size_t>(i)]);
      }
      const BarNoteSet sa(ka), sb(kb);
      jaccard_bad += bar_similarity(sa, sb) != oracle::jaccard(oracle::as_set(sa), oracle::as_set(sb));
    }

  std::mt19937_64 rng(1006);
  std::size_t dist_bad = 0;
  for (int corpus_id = 0; corpus_id < 20; ++corpus_id) {
    std::vector<SongBars> corpus;
    for (int s = 0; s < 10; ++s) {
      SongBars song;
      for (int b = std::uniform_int_distribution<int>(0, 30)(rng); b > 0; --b) {
        std::vector<NoteKey> keys;
        for (int k = std::uniform_int_distribution<int>(0, 4)(rng); k > 0; --k)
          keys.push_back(universe[rng() % universe.size()]);
        song.emplace_back(keys);
      }
      corpus.push_back(std::move(song));
    }
    SimilarityOptions opt;
    const auto d = similarity_distribution(std::span<const SongBars>(corpus), opt);
    const auto want = oracle::pair_distribution(corpus, opt.horizon);
    for (int t = 1; t <= opt.horizon; ++t) dist_bad += d.at(t) != want[static_cast<std::size_t>(t)];
  }

  SimilarityDistribution d;
  d.horizon = 40;
  d.L.assign(41, 0.0);
  d.counts.assign(41, 1);
  for (int t = 1; t <= 40; ++t) d.L[static_cast<std::size_t>(t)] = std::uniform_real_distribution<double>(0, 0.8)(rng);
  const double self = similarity_error(d, d);
  const double delta = 0.137;
  SimilarityDistribution shifted = d;
  for (int t = 1; t <= 40; ++t) shifted.L[static_cast<std::size_t>(t)] += delta;
  const double offset_err = std::abs(similarity_error(shifted, d) - delta);

  return {jaccard_bad == 0 && dist_bad == 0 && self == 0.0 && offset_err <= 1e-12,
          "Jaccard mismatches " + std::to_string(jaccard_bad) + "/4096; distribution mismatches " +
              std::to_string(dist_bad) + " over 20 ten-song corpora (exact); SE(d,d) = " + fmt(self) +
              "; |SE(d+delta,d) - delta| = " + fmt(offset_err) + " (tol 1e-12)"};
}

const std::vector<std::size_t> kScalingBars{32, 64, 128, 256};
constexpr int kScalingBarLength = 32;

Outcome criterion_7a() {
  const BarSelection sel = BarSelection::paper_default();
  const auto k = static_cast<double>(sel.size());
  const double m = kScalingBarLength;
  bool ok = true;
  double last = 2.0;
  std::ostringstream detail;
  detail << "m=32, k=8: density";
  for (std::size_t b : kScalingBars) {
    const LayoutSpec spec = uniform_layout_spec(b, kScalingBarLength, sel);
    const auto pairs = static_cast<double>(layout_stats(build_combined_layout(spec)).allowed_pairs);
    const double total = static_cast<double>(spec.total());
    const double n = static_cast<double>(spec.music_count());
    const double bound = (k * m + static_cast<double>(b) + m) * n + (m + 1) * static_cast<double>(b);
    const double density = pairs / (total * total);
    ok = ok && density < last && pairs <= bound;
    last = density;
    detail << " b=" << b << ":" << fmt(density) << (pairs <= bound ? "" : "(over bound)");
  }
  detail << "; strictly decreasing and within (k*m+b+m)*n+(m+1)*b";
  return {ok, detail.str()};
}

Outcome criterion_7b() {
  const fs::path dir = scratch_dir("7b");
  std::ostringstream args;
  args << "bench-scaling --bar-length " << kScalingBarLength << " --repeats 3 --bars ";
  for (std::size_t i = 0; i < kScalingBars.size(); ++i) args << (i ? "," : "") << kScalingBars[i];
  const Shell r = run_cli(args.str(), dir);
  if (r.code != 0) return {false, "bench-scaling exited with " + std::to_string(r.code)};
  std::vector<double> sparse, dense;
  std::istringstream in(r.out);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() < 8) return {false, "malformed bench-scaling row: " + line};
    sparse.push_back(std::stod(cells[6]));
    dense.push_back(std::stod(cells[7]));
  }
  // Every measured point has n >= 4*k*m = 1024, so every doubling counts.
  bool ok = sparse.size() == kScalingBars.size();
  std::ostringstream detail;
  detail << "per-doubling growth, sparse:";
  for (std::size_t i = 1; i < sparse.size(); ++i) {
    const double g = sparse[i] / sparse[i - 1];
    ok = ok && g <= 1.5;
    detail << " " << fmt(g) << "x";
  }
  detail << " (limit 1.5x); dense:";
  for (std::size_t i = 1; i < dense.size(); ++i) {
    const double g = dense[i] / dense[i - 1];
    ok = ok && g >= 3.0 && g <= 5.0;
    detail << " " << fmt(g) << "x";
  }
  detail << " (expect 3x..5x); sparse ms";
  for (double v : sparse) detail << " " << fmt(v, 4);
  detail << "; dense ms";
  for (double v : dense) detail << " " << fmt(v, 4);
  fs::remove_all(dir);
  return {ok, detail.str()};
}

Outcome criterion_8() {
  Stopwatch clock;
  SyntheticOptions opt;
  opt.bars = 16;
  opt.period = 4;
  const auto train_set = model_sequences(encode_all(periodic_corpus(200, opt, 8001)), 16);
  const auto held_out = model_sequences(encode_all(periodic_corpus(50, opt, 8002)), 16);
  auto run = [&](const BarSelection& selection, std::uint64_t seed) {
    ModelConfig mc;
    mc.n_layers = 2;
    mc.d_model = 32;
    mc.n_heads = 4;
    mc.ffn_hidden = 64;
    mc.max_bars = 16;
    mc.selection = selection;
    TrainConfig tc;
    tc.peak_lr = 2e-3;
    tc.warmup_steps = 100;
    tc.batch_songs = 4;
    tc.max_steps = 2000;
    tc.valid_every = tc.max_steps;
    tc.seed = seed;
    auto r = train<float>(std::span<const ModelSequence>(train_set), {}, mc, tc,
                          init_params<double>(mc, seed).cast<float>());
    return mean_nll(r.last, mc, std::span<const ModelSequence>(held_out));
  };
  double structured = 0, recent = 0;
  std::ostringstream per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    const double a = run(BarSelection{1, 2, 4, 8}, seed);
    const double b = run(BarSelection::recent(8), seed);
    structured += a / 3;
    recent += b / 3;
    per_seed << " seed " << seed << ": " << fmt(a, 4) << " vs " << fmt(b, 4) << ";";
  }
  const double minutes = clock.seconds() / 60;
  return {structured < recent && minutes < 30,
          "held-out nll after 2000 steps, selection {1,2,4,8} " + fmt(structured, 5) + " vs recent {1..8} " +
              fmt(recent, 5) + " (mean of 3 seeds;" + per_seed.str() + " " + fmt(minutes) + " min, limit 30)"};
}

Outcome criterion_9() {
  SyntheticOptions opt;
  opt.bars = 8;
  std::mt19937_64 rng(9001);
  const std::vector<ModelSequence> song{to_model_sequence(encode(periodic_song(opt, rng)), 8)};
  ModelConfig mc;
  mc.n_layers = 2;
  mc.d_model = 32;
  mc.n_heads = 4;
  mc.ffn_hidden = 64;
  mc.max_bars = 8;
  mc.selection = BarSelection{1, 2, 4};
  TrainConfig tc;
  tc.peak_lr = 3e-3;
  tc.warmup_steps = 50;
  tc.batch_songs = 1;
  tc.max_steps = 2000;
  tc.valid_every = 50;
  tc.weight_decay = 0;
  int first_below = 0;
  double final_ppl = 0;
  auto r = train<float>(std::span<const ModelSequence>(song), std::span<const ModelSequence>(song), mc, tc,
                        init_params<double>(mc, 9).cast<float>(),
                        [&](int step, double nll, bool, const ModelParams<float>&) {
                          if (!first_below && std::exp(nll) < 1.1) first_below = step;
                          final_ppl = std::exp(nll);
                        });
  (void)r;
  return {first_below > 0, "one 8-bar song (" + std::to_string(song[0].size()) + " predictions): train PPL " +
                               (first_below ? "< 1.1 first at step " + std::to_string(first_below) : "never < 1.1") +
                               ", " + fmt(final_ppl, 4) + " at step 2000 (limit 1.1 within 2000 steps)"};
}

// Random quantized multi-track piece; same-pitch notes never overlap within a
// role, so note-on/note-off pairing in a MIDI file is unambiguous.
TrackSet random_piece(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> bars(1, 8), per_bar(0, 3), pos(0, 15), dur(1, 16), pitch(21, 108), drum(0, 127);
  TrackSet ts;
  const int b = bars(rng);
  for (int i = 0; i < b; ++i) ts.bars.push_back({Beats(4 * i), Beats(4)});
  for (Role r : kRoles) {
    auto& notes = ts.role(r);
    for (int i = 0; i < b; ++i)
      for (int k = per_bar(rng); k > 0; --k) {
        Note n;
        n.onset = Beats(4 * i) + Beats(pos(rng), 4);
        n.duration = Beats(dur(rng), 4);
        n.pitch = r == Role::drum ? drum(rng) : pitch(rng);
        const bool clash = std::any_of(notes.begin(), notes.end(), [&](const Note& o) {
          return o.pitch == n.pitch && o.onset < n.onset + n.duration && n.onset < o.onset + o.duration;
        });
        if (!clash) notes.push_back(n);
      }
    std::sort(notes.begin(), notes.end());
  }
  return ts;
}

TrackSet through_midi(const TrackSet& ts) {
  return quantize(compress_tracks(parse_smf(write_smf(to_midi_piece(ts)))));
}

TrackSet filter_base() {
  TrackSet ts;
  for (int b = 0; b < 4; ++b) ts.bars.push_back({Beats(4 * b), Beats(4)});
  for (int b = 0; b < 4; ++b) {
    ts.role(Role::melody).push_back({60 + b, Beats(4 * b), Beats(1), 80});
    ts.role(Role::piano).push_back({48 + b, Beats(4 * b), Beats(2), 80});
  }
  return ts;
}

Outcome criterion_10() {
  std::mt19937_64 rng(1010);
  int token_failures = 0, midi_failures = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const TrackSet ts = random_piece(rng);
    const TokenSeq seq = encode(ts);
    const DecodeResult back = decode(seq);
    bool same = !back.error && back.tracks.bars == ts.bars;
    for (Role r : kRoles) same = same && back.tracks.role(r) == ts.role(r);
    token_failures += !same;

    const TrackSet once = through_midi(ts);
    const TrackSet twice = through_midi(decode(encode(once)).tracks);
    bool fix = true;
    for (Role r : kRoles) fix = fix && once.role(r) == ts.role(r) && twice.role(r) == once.role(r);
    midi_failures += !fix;
  }

  const FilterRules rules;
  std::map<RejectReason, TrackSet> reject;
  {
    TrackSet ts = filter_base();
    ts.time_signatures = {TimeSignature{3, 4}};
    for (auto& b : ts.bars) b.length = 3;
    reject[RejectReason::time_signature] = ts;
  }
  {
    TrackSet ts = filter_base();
    ts.role(Role::piano).clear();
    reject[RejectReason::min_instruments] = ts;
  }
  {
    TrackSet ts = filter_base();
    ts.role(Role::guitar) = ts.role(Role::melody);
    ts.role(Role::melody).clear();
    reject[RejectReason::melody_missing] = ts;
  }
  {
    TrackSet ts = filter_base();
    ts.tempos = {20.0};
    ts.tempo_bpm = 20.0;
    reject[RejectReason::tempo_range] = ts;
  }
  {
    TrackSet ts = filter_base();
    ts.role(Role::melody)[1].pitch = 109;
    reject[RejectReason::pitch_range] = ts;
  }
  {
    TrackSet ts = filter_base();
    ts.role(Role::piano)[3].duration = Beats(33, 2);
    reject[RejectReason::max_note_duration] = ts;
  }
  {
    TrackSet ts = filter_base();
    for (int b = 4; b < 9; ++b) ts.bars.push_back({Beats(4 * b), Beats(4)});
    ts.role(Role::melody).push_back({70, Beats(32), Beats(1), 80});
    reject[RejectReason::empty_bars] = ts;
  }
  {
    TrackSet ts = filter_base();
    for (auto& n : ts.role(Role::melody)) n.pitch = 64;
    for (auto& n : ts.role(Role::piano)) n.pitch = 64;
    reject[RejectReason::uniform_values] = ts;
  }
  int rule_failures = 0;
  const TrackSet good = filter_base();
  rule_failures += !filter_piece(good, rules).accepted();
  for (RejectReason rule : kFilterOrder) {
    auto it = reject.find(rule);
    if (it == reject.end()) {
      ++rule_failures;
      continue;
    }
    const FilterVerdict v = filter_piece(it->second, rules);
    rule_failures += !passes_rule(good, rules, rule) || v.accepted() || *v.reject != rule;
  }
  return {token_failures == 0 && midi_failures == 0 && rule_failures == 0,
          "decode(encode) failures " + std::to_string(token_failures) + "/1000; SMF round-trip fixpoint failures " +
              std::to_string(midi_failures) + "/1000; filter rule cases failing " + std::to_string(rule_failures) +
              " of " + std::to_string(2 * kFilterOrder.size()) + " (one accept and one reject per rule)"};
}

Outcome criterion_11() {
  const fs::path dir = scratch_dir("11");
  auto p = [&](const std::string& name) { return (dir / name).string(); };
  std::ostringstream log;
  auto step = [&](const std::string& args) {
    const Shell r = run_cli(args, dir);
    if (r.code != 0) throw std::runtime_error("`museformer " + args.substr(0, args.find(' ')) + "` exited with " +
                                              std::to_string(r.code));
    return r.out;
  };
  try {
    step("synth --songs 100 --bars 16 --period 4 --seed 11 --output " + p("train.tok"));
    step("train --train " + p("train.tok") + " --output " + p("model.ck") +
         " --layers 2 --d-model 32 --heads 4 --ffn 64 --max-bars 16 --selection 1,2,4,8 --steps 600 --warmup 60"
         " --lr 2e-3 --batch 4 --valid-every 600");
    step("generate --checkpoint " + p("model.ck") + " --output " + p("gen.tok") +
         " --count 100 --top-k 8 --max-len 400 --min-len 40 --seed 11");
    const double se = std::stod(step("eval-se --generated " + p("gen.tok") + " --reference " + p("train.tok")));

    const auto songs = read_corpus(p("train.tok"));
    const std::vector<TokenSeq> a(songs.begin(), songs.begin() + 50), b(songs.begin() + 50, songs.end());
    write_corpus(p("a.tok"), p("a.spans"), a);
    write_corpus(p("b.tok"), p("b.spans"), b);
    const double halves = std::stod(step("eval-se --generated " + p("a.tok") + " --reference " + p("b.tok")));
    fs::remove_all(dir);
    return {se >= 0 && se <= 1 && halves < 0.02, "SE(100 generated, training corpus) = " + fmt(se, 4) +
                                                     " (must lie in [0,1]); SE(training halves) = " + fmt(halves, 4) +
                                                     " (tol 0.02)"};
  } catch (const std::exception& e) {
    return {false, e.what()};
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string only;
  app.add_option("--criterion", only, "Run a single criterion: 1..6, 7a, 7b, 8..11");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"1", criterion_1},   {"2", criterion_2},   {"3", criterion_3}, {"4", criterion_4},
      {"5", criterion_5},   {"6", criterion_6},   {"7a", criterion_7a}, {"7b", criterion_7b},
      {"8", criterion_8},   {"9", criterion_9},   {"10", criterion_10}, {"11", criterion_11},
  };
  bool all = true, found = false;
  for (const auto& [id, run] : criteria) {
    if (!only.empty() && only != id) continue;
    found = true;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << o.detail << std::endl;
    all = all && o.pass;
  }
  if (!found) {
    std::cerr << "unknown criterion " << only << "\n";
    return 2;
  }
  return all ? 0 : 1;
}
