// museformer: the pipeline as subcommands.
//
// Exit codes: 0 ok, 1 user error (bad flags, unreadable or mismatched inputs),
// 2 internal error. Every output is a pure function of inputs and flags,
// except the wall-time columns of bench-scaling.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "museformer/museformer.hpp"

namespace fs = std::filesystem;
using namespace museformer;

namespace {

class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// `songs.tok` pairs with `songs.spans`.
std::string spans_path_for(const std::string& tokens_path) {
  return fs::path(tokens_path).replace_extension(".spans").string();
}

std::vector<TokenSeq> load_corpus(const std::string& path) {
  if (!fs::exists(path)) throw UserError("corpus not found: " + path);
  const std::string spans = spans_path_for(path);
  return read_corpus(path, fs::exists(spans) && spans != path ? spans : "");
}

void save_corpus(const std::string& path, const std::vector<TokenSeq>& songs) {
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  write_corpus(path, spans_path_for(path), songs);
}

Checkpoint open_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw UserError("checkpoint not found: " + path);
  return load_checkpoint(path);
}

// Writes to `path`, or stdout when it is empty or "-".
template <typename F>
void emit(const std::string& path, F&& write) {
  if (path.empty() || path == "-") {
    write(std::cout);
    return;
  }
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw UserError("cannot write " + path);
  write(out);
}

void write_midi(const std::string& path, const TrackSet& ts) {
  const auto bytes = write_smf(to_midi_piece(ts));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UserError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// Runs fn(i) for i in [0, n) on `jobs` threads. Callers store results by
// index, so the output order never depends on scheduling.
template <typename F>
void parallel_for(std::size_t n, int jobs, F&& fn) {
  const auto workers = static_cast<std::size_t>(std::clamp(jobs, 1, 64));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  for (auto& t : pool) t.join();
}

std::vector<SongBars> corpus_bars(const std::vector<TokenSeq>& songs, const TrackScope& scope) {
  std::vector<SongBars> out;
  out.reserve(songs.size());
  for (const auto& s : songs) out.push_back(bar_note_sets(decode(s).tracks, scope));
  return out;
}

SimilarityDistribution corpus_distribution(const std::vector<TokenSeq>& songs, const std::string& track,
                                           const SimilarityOptions& opt) {
  const TrackScope scope = TrackScope::parse(track);
  const auto bars = corpus_bars(songs, scope);
  if (std::none_of(bars.begin(), bars.end(), [](const SongBars& b) { return b.size() >= 2; }))
    throw UserError("every song has fewer than 2 bars; no bar pairs to compare");
  return similarity_distribution(std::span<const SongBars>(bars), opt, scope.name());
}

std::vector<std::size_t> parse_sizes(const std::string& text, const char* what) {
  std::vector<std::size_t> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || v <= 0) throw UserError(std::string("bad ") + what + " '" + item + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw UserError(std::string("empty ") + what + " list");
  return out;
}

Beats beats_from_json(const nlohmann::json& v) {
  if (v.is_number_integer()) return Beats(v.get<std::int64_t>());
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    const auto slash = s.find('/');
    if (slash != std::string::npos) return Beats(std::stoll(s.substr(0, slash)), std::stoll(s.substr(slash + 1)));
    return Beats(std::stoll(s));
  }
  throw UserError("rules: max_note_duration must be an integer or an \"a/b\" string of beats");
}

FilterRules load_rules(const std::string& path) {
  FilterRules r;
  if (path.empty()) return r;
  std::ifstream in(path);
  if (!in) throw UserError("cannot open rules file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw UserError("rules file " + path + ": " + e.what());
  }
  static const std::set<std::string> known = {"require_44",        "min_instruments",  "require_melody",
                                              "min_tempo",         "max_tempo",        "min_pitch",
                                              "max_pitch",         "max_note_duration", "max_consecutive_empty_bars",
                                              "reject_uniform_pitch_or_duration"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw UserError("rules file: unknown key '" + key + "'");
  r.require_44 = j.value("require_44", r.require_44);
  r.min_instruments = j.value("min_instruments", r.min_instruments);
  r.require_melody = j.value("require_melody", r.require_melody);
  r.min_tempo = j.value("min_tempo", r.min_tempo);
  r.max_tempo = j.value("max_tempo", r.max_tempo);
  r.min_pitch = j.value("min_pitch", r.min_pitch);
  r.max_pitch = j.value("max_pitch", r.max_pitch);
  if (j.contains("max_note_duration")) r.max_note_duration = beats_from_json(j["max_note_duration"]);
  r.max_consecutive_empty_bars = j.value("max_consecutive_empty_bars", r.max_consecutive_empty_bars);
  r.reject_uniform_pitch_or_duration = j.value("reject_uniform_pitch_or_duration", r.reject_uniform_pitch_or_duration);
  r.validate();
  return r;
}

RoleMapping load_mapping(const std::string& path) {
  if (path.empty()) return RoleMapping::general_midi();
  std::ifstream in(path);
  if (!in) throw UserError("cannot open mapping file " + path);
  return RoleMapping::from_stream(in);
}

// ---------------------------------------------------------------------------
// ingest

struct IngestOptions {
  std::string input;
  std::string output;
  std::string rules;
  std::string mapping;
  int jobs = 1;
};

struct FileOutcome {
  std::string path;  // relative to the input directory, '/'-separated
  std::optional<TrackSet> tracks;
  std::string reason;
  std::string message;
  int unbalanced = 0;
};

bool is_midi_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".mid" || ext == ".midi";
}

int run_ingest(const IngestOptions& o) {
  if (!fs::is_directory(o.input)) throw UserError("not a directory: " + o.input);
  const FilterRules rules = load_rules(o.rules);
  const RoleMapping mapping = load_mapping(o.mapping);

  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(o.input))
    if (entry.is_regular_file() && is_midi_file(entry.path())) files.push_back(entry.path());
  std::vector<std::string> rel(files.size());
  for (std::size_t i = 0; i < files.size(); ++i) rel[i] = fs::relative(files[i], o.input).generic_string();
  std::vector<std::size_t> order(files.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rel[a] < rel[b]; });

  std::vector<FileOutcome> outcomes(files.size());
  parallel_for(order.size(), o.jobs, [&](std::size_t k) {
    const std::size_t i = order[k];
    FileOutcome& out = outcomes[k];
    out.path = rel[i];
    MidiPiece piece;
    try {
      piece = read_smf_file(files[i].string());
    } catch (const std::exception& e) {
      out.reason = "io";
      out.message = e.what();
      return;
    }
    out.unbalanced = piece.unbalanced_note_ons;
    try {
      TrackSet ts = quantize(compress_tracks(piece, mapping));
      const FilterVerdict verdict = filter_piece(ts, rules);
      if (!verdict.accepted()) {
        out.reason = std::string(reason_code(*verdict.reject));
        return;
      }
      out.tracks = std::move(ts);
    } catch (const std::exception& e) {
      out.reason = "invalid";
      out.message = e.what();
    }
  });

  fs::create_directories(o.output);
  std::ofstream manifest(fs::path(o.output) / "manifest.jsonl");
  if (!manifest) throw UserError("cannot write manifest in " + o.output);
  DuplicateFilter duplicates;
  std::vector<TokenSeq> songs;
  std::size_t rejected = 0;
  for (auto& out : outcomes) {
    nlohmann::ordered_json rec;
    rec["path"] = out.path;
    if (out.tracks && !duplicates.admit(*out.tracks)) out.reason = "duplicate";
    std::optional<TokenSeq> seq;
    if (out.reason.empty()) {
      try {
        seq = encode(*out.tracks);
      } catch (const std::exception& e) {
        out.reason = "encode";
        out.message = e.what();
      }
    }
    if (seq) {
      rec["status"] = "accepted";
      rec["song"] = songs.size();
      rec["bars"] = seq->bar_count();
      rec["notes"] = out.tracks->note_count();
      rec["tokens"] = seq->ids.size();
      songs.push_back(std::move(*seq));
    } else {
      ++rejected;
      rec["status"] = "rejected";
      rec["reason"] = out.reason;
      if (!out.message.empty()) rec["message"] = out.message;
    }
    if (out.unbalanced > 0) rec["warnings"] = {"unbalanced_note_ons=" + std::to_string(out.unbalanced)};
    manifest << rec.dump() << "\n";
  }
  save_corpus((fs::path(o.output) / "corpus.tok").string(), songs);
  emit((fs::path(o.output) / "vocab.json").string(),
       [](std::ostream& out) { out << Vocabulary::to_json().dump(2) << "\n"; });
  std::cout << "files " << outcomes.size() << " accepted " << songs.size() << " rejected " << rejected << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// synth, to-midi

struct SynthOptions {
  std::size_t songs = 10;
  int bars = 16;
  int period = 4;
  std::uint64_t seed = 0;
  std::string output;
  std::string midi_dir;
};

int run_synth(const SynthOptions& o) {
  SyntheticOptions opt;
  opt.bars = o.bars;
  opt.period = o.period;
  opt.validate();
  const auto pieces = periodic_corpus(o.songs, opt, o.seed);
  std::vector<TokenSeq> songs;
  for (const auto& ts : pieces) songs.push_back(encode(ts));
  save_corpus(o.output, songs);
  if (!o.midi_dir.empty()) {
    fs::create_directories(o.midi_dir);
    for (std::size_t i = 0; i < pieces.size(); ++i) {
      std::ostringstream name;
      name << "song_" << std::setw(5) << std::setfill('0') << i << ".mid";
      write_midi((fs::path(o.midi_dir) / name.str()).string(), pieces[i]);
    }
  }
  std::cout << "songs " << songs.size() << "\n";
  return 0;
}

int run_to_midi(const std::string& corpus, std::size_t song, const std::string& output) {
  const auto songs = load_corpus(corpus);
  if (song >= songs.size()) throw UserError("song index " + std::to_string(song) + " out of range");
  DecodeResult r = decode(songs[song]);
  if (r.error) std::cerr << "warning: token " << r.error->index << ": " << r.error->message << "\n";
  write_midi(output, r.tracks);
  return 0;
}

// ---------------------------------------------------------------------------
// stats, select-bars, eval-se

struct SimilarityFlags {
  std::string track = "melody";
  int horizon = 40;
  bool both_empty_as_one = false;
  bool per_song_mean = false;

  SimilarityOptions options() const {
    if (horizon < 1) throw UserError("--horizon must be >= 1");
    return {horizon, both_empty_as_one, per_song_mean};
  }
};

int run_stats(const std::string& corpus, const SimilarityFlags& f, const std::string& output) {
  const auto d = corpus_distribution(load_corpus(corpus), f.track, f.options());
  emit(output, [&](std::ostream& out) { write_distribution_csv(out, d); });
  return 0;
}

int run_select_bars(const std::string& distribution, int k, int max_offset, bool paper_default) {
  if (paper_default) {
    std::cout << BarSelection::paper_default().str() << "\n";
    return 0;
  }
  if (distribution.empty()) throw UserError("--distribution is required unless --use-paper-default is given");
  std::ifstream in(distribution);
  if (!in) throw UserError("cannot open " + distribution);
  const SimilarityDistribution d = read_distribution_csv(in);
  std::cout << select_structure_bars(d, k, std::min(max_offset, d.horizon)).str() << "\n";
  return 0;
}

int run_eval_se(const std::string& generated, const std::string& reference, const SimilarityFlags& f,
                const std::string& dump) {
  const auto opt = f.options();
  const auto g = corpus_distribution(load_corpus(generated), f.track, opt);
  const auto r = corpus_distribution(load_corpus(reference), f.track, opt);
  if (!dump.empty()) {
    emit(dump + ".generated.csv", [&](std::ostream& out) { write_distribution_csv(out, g); });
    emit(dump + ".reference.csv", [&](std::ostream& out) { write_distribution_csv(out, r); });
  }
  std::cout << std::setprecision(17) << similarity_error(g, r, f.horizon) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// layout

struct LayoutFlags {
  std::string corpus;
  std::size_t song = 0;
  std::size_t bars = 0;
  int bar_length = 0;
  std::string selection;
  std::size_t block_size = 32;
  std::string dump;
  bool interleaved = false;
  bool no_coarse = false;
  bool related_summaries = false;
};

int run_layout(const LayoutFlags& f) {
  const BarSelection selection = f.selection.empty() ? BarSelection::paper_default() : BarSelection::parse(f.selection);
  LayoutSpec spec;
  if (!f.corpus.empty()) {
    const auto songs = load_corpus(f.corpus);
    if (f.song >= songs.size()) throw UserError("song index " + std::to_string(f.song) + " out of range");
    spec = LayoutSpec::from_token_seq(songs[f.song], selection);
  } else {
    if (f.bars == 0 || f.bar_length < 0) throw UserError("give --corpus, or --bars with --bar-length");
    spec = uniform_layout_spec(f.bars, f.bar_length, selection);
  }
  spec.coarse = !f.no_coarse;
  spec.include_related_summaries = f.related_summaries;
  spec.arrangement = f.interleaved ? Arrangement::interleaved : Arrangement::summary_first;
  if (f.block_size == 0) throw UserError("--block-size must be >= 1");

  const BoolLayout layout = build_combined_layout(spec);
  const BlockLayout blocks = blocksparsify(layout, f.block_size);
  const LayoutStats stats = layout_stats(layout);
  const double n = static_cast<double>(layout.rows());
  nlohmann::ordered_json j;
  j["bars"] = spec.bar_count();
  j["music_tokens"] = spec.music_count();
  j["total"] = spec.total();
  j["selection"] = selection.str();
  j["allowed_pairs"] = stats.allowed_pairs;
  j["density"] = n > 0 ? static_cast<double>(stats.allowed_pairs) / (n * n) : 0.0;
  j["per_query_max"] = stats.per_query_max;
  j["block_size"] = f.block_size;
  j["kept_blocks"] = blocks.kept_blocks.size();
  j["block_density"] = blocks.density();
  std::cout << j.dump(2) << "\n";
  if (!f.dump.empty()) {
    emit(f.dump + ".pbm", [&](std::ostream& out) { write_pbm(out, layout); });
    emit(f.dump + ".blocks", [&](std::ostream& out) { write_block_list(out, blocks); });
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainFlags {
  std::string train;
  std::string valid;
  std::string config;
  std::string output;
  std::string log;
  std::string precision = "float";
  std::uint64_t init_seed = 0;
  // Overrides; applied only when given on the command line.
  int layers = 0, d_model = 0, heads = 0, ffn = 0, max_bars = 0;
  std::string selection, norm;
  bool no_coarse = false;
  int steps = -1, warmup = 0, batch = 0, valid_every = 0, patience = -1;
  double lr = 0;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::size_t max_tokens = 0;
};

int run_train(const TrainFlags& f, const CLI::App& cmd) {
  ModelConfig mc;
  mc.d_model = 64;
  TrainConfig tc;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw UserError("cannot open config " + f.config);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
      if (j.contains("model")) mc = j["model"].get<ModelConfig>();
      if (j.contains("train")) tc = j["train"].get<TrainConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw UserError("config " + f.config + ": " + e.what());
    }
  }
  auto given = [&](const char* name) { return cmd.count(name) > 0; };
  if (given("--layers")) mc.n_layers = f.layers;
  if (given("--d-model")) mc.d_model = f.d_model;
  if (given("--heads")) mc.n_heads = f.heads;
  if (given("--ffn")) mc.ffn_hidden = f.ffn;
  if (given("--max-bars")) mc.max_bars = f.max_bars;
  if (given("--selection")) mc.selection = BarSelection::parse(f.selection);
  if (given("--norm")) mc.norm = f.norm == "post" ? NormPlacement::post : NormPlacement::pre;
  if (f.no_coarse) mc.coarse = false;
  if (given("--steps")) tc.max_steps = f.steps;
  if (given("--warmup")) tc.warmup_steps = f.warmup;
  if (given("--batch")) tc.batch_songs = f.batch;
  if (given("--valid-every")) tc.valid_every = f.valid_every;
  if (given("--patience")) tc.patience = f.patience;
  if (given("--lr")) tc.peak_lr = f.lr;
  if (given("--seed")) tc.seed = f.seed;
  if (given("--max-tokens")) tc.max_tokens = f.max_tokens;
  mc.validate();
  tc.validate();

  auto sequences = [&](const std::string& path) {
    std::vector<ModelSequence> out;
    for (const auto& s : load_corpus(path))
      if (s.ids.size() >= 2) out.push_back(to_model_sequence(s, mc.max_bars));
    return out;
  };
  const auto train_set = sequences(f.train);
  if (train_set.empty()) throw UserError("training corpus has no usable songs");
  const auto valid_set = f.valid.empty() ? std::vector<ModelSequence>{} : sequences(f.valid);

  auto finish = [&](const auto& r) {
    nlohmann::json meta = {{"best_step", r.best_step},
                           {"steps", r.log.steps.size()},
                           {"stopped_early", r.stopped_early},
                           {"train", tc},
                           {"init_seed", f.init_seed}};
    if (std::isfinite(r.best_valid_nll)) meta["best_valid_nll"] = r.best_valid_nll;
    save_checkpoint(f.output, mc, r.best, meta);
    if (!f.log.empty()) emit(f.log, [&](std::ostream& out) { r.log.write_csv(out); });
    const auto& last = r.log.steps.empty() ? StepRecord{} : r.log.steps.back();
    std::cout << "steps " << r.log.steps.size() << " last_train_nll " << std::setprecision(6) << last.train_nll;
    if (std::isfinite(r.best_valid_nll)) std::cout << " best_valid_nll " << r.best_valid_nll << " at " << r.best_step;
    std::cout << "\n";
  };
  auto init = init_params<double>(mc, f.init_seed);
  std::span<const ModelSequence> tr(train_set), va(valid_set);
  if (f.precision == "double")
    finish(train<double>(tr, va, mc, tc, std::move(init)));
  else
    finish(train<float>(tr, va, mc, tc, init.cast<float>()));
  return 0;
}

// ---------------------------------------------------------------------------
// generate, eval-ppl

struct GenerateFlags {
  std::string checkpoint;
  std::string output;
  std::string midi_dir;
  std::string prompt;
  std::size_t prompt_bars = 0;
  std::size_t count = 1;
  int top_k = 8;
  std::size_t max_len = 1024;
  std::size_t min_len = 0;
  std::uint64_t seed = 0;
  int jobs = 1;
};

int run_generate(const GenerateFlags& f) {
  const Checkpoint ck = open_checkpoint(f.checkpoint);
  TokenSeq prompt = make_token_seq({Vocabulary::kBos});
  if (!f.prompt.empty()) {
    const auto songs = load_corpus(f.prompt);
    if (songs.empty()) throw UserError("prompt corpus is empty");
    std::vector<int> ids = songs.front().ids;
    if (!ids.empty() && ids.back() == Vocabulary::kEos) ids.pop_back();
    if (f.prompt_bars > 0 && songs.front().bar_count() > f.prompt_bars)
      ids.resize(songs.front().bar_spans[f.prompt_bars].begin);
    prompt = make_token_seq(std::move(ids));
  }
  std::vector<TokenSeq> pieces(f.count);
  parallel_for(f.count, f.jobs, [&](std::size_t i) {
    GenerationConfig g;
    g.top_k = f.top_k;
    g.max_len = f.max_len;
    g.min_len = f.min_len;
    g.seed = f.seed + i;
    pieces[i] = generate(ck.params, ck.config, prompt, g);
  });
  save_corpus(f.output, pieces);
  if (!f.midi_dir.empty()) {
    fs::create_directories(f.midi_dir);
    for (std::size_t i = 0; i < pieces.size(); ++i) {
      std::ostringstream name;
      name << "gen_" << std::setw(5) << std::setfill('0') << i << ".mid";
      write_midi((fs::path(f.midi_dir) / name.str()).string(), decode(pieces[i]).tracks);
    }
  }
  std::cout << "pieces " << pieces.size() << "\n";
  return 0;
}

int run_eval_ppl(const std::string& checkpoint, const std::string& corpus, const std::string& lengths,
                 const std::string& output) {
  const Checkpoint ck = open_checkpoint(checkpoint);
  std::vector<ModelSequence> seqs;
  for (const auto& s : load_corpus(corpus))
    if (s.ids.size() >= 2) seqs.push_back(to_model_sequence(s, ck.config.max_bars));
  if (seqs.empty()) throw UserError("corpus has no usable songs");
  const auto L = parse_sizes(lengths, "prefix length");
  LayoutCache cache;
  const auto ppl = perplexity_at_prefix(ck.params, ck.config, std::span<const ModelSequence>(seqs),
                                        std::span<const std::size_t>(L), &cache);
  emit(output, [&](std::ostream& out) {
    out << "length,ppl\n" << std::setprecision(17);
    for (std::size_t i = 0; i < L.size(); ++i) out << L[i] << "," << ppl[i] << "\n";
  });
  return 0;
}

// ---------------------------------------------------------------------------
// bench-scaling

struct BenchFlags {
  std::string bars = "32,64,128,256";
  int bar_length = 32;
  std::string selection;
  int d_model = 32;
  int heads = 4;
  int repeats = 3;
  std::size_t dense_max_bars = 256;
  bool no_timing = false;
  std::uint64_t seed = 0;
  std::string output;
};

template <typename F>
double best_ms(int repeats, F&& f) {
  double best = std::numeric_limits<double>::infinity();
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

int run_bench(const BenchFlags& f) {
  const BarSelection selection = f.selection.empty() ? BarSelection::paper_default() : BarSelection::parse(f.selection);
  const auto sizes = parse_sizes(f.bars, "bar count");
  if (f.bar_length < 1) throw UserError("--bar-length must be >= 1");
  if (f.d_model < 1 || f.heads < 1 || f.d_model % f.heads != 0) throw UserError("--d-model must be a multiple of --heads");
  if (f.repeats < 1) throw UserError("--repeats must be >= 1");
  const auto m = static_cast<std::uint64_t>(f.bar_length);
  const auto k = static_cast<std::uint64_t>(selection.size());

  std::mt19937_64 rng(f.seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  auto random_matrix = [&](Eigen::Index r, Eigen::Index c, float scale) {
    Matrix<float> x(r, c);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = scale * normal(rng);
    return x;
  };
  const Eigen::Index d = f.d_model;
  auto p = AttentionParams<float>::zeros(d);
  const float w = 1.0f / std::sqrt(static_cast<float>(d));
  p.w_q = random_matrix(d, d, w);
  p.w_k = random_matrix(d, d, w);
  p.w_v = random_matrix(d, d, w);
  p.w_o = random_matrix(d, d, w);
  p.w_k_sum = random_matrix(d, d, w);
  p.w_v_sum = random_matrix(d, d, w);

  emit(f.output, [&](std::ostream& out) {
    out << "bars,n,total,allowed_pairs,density,bound,sparse_ms,dense_ms\n";
    for (std::size_t b : sizes) {
      const LayoutSpec spec = uniform_layout_spec(b, f.bar_length, selection);
      const BoolLayout combined = build_combined_layout(spec);
      const LayoutStats stats = layout_stats(combined);
      const std::uint64_t n = b * m;
      const std::uint64_t bound = (k * m + b + m) * n + (m + 1) * b;
      const double total = static_cast<double>(spec.total());
      out << b << "," << n << "," << spec.total() << "," << stats.allowed_pairs << "," << std::setprecision(10)
          << static_cast<double>(stats.allowed_pairs) / (total * total) << "," << bound << ",";
      if (!f.no_timing) {
        const LayoutBundle bundle = LayoutBundle::build(spec);
        const Matrix<float> X = random_matrix(static_cast<Eigen::Index>(spec.total()), d, 1.0f);
        out << std::setprecision(6) << best_ms(f.repeats, [&] { (void)fc_attention(X, bundle, p, f.heads); });
        out << ",";
        if (b <= f.dense_max_bars) {
          const Matrix<float> Q = X * p.w_q, K = X * p.w_k, V = X * p.w_v;
          out << best_ms(f.repeats, [&] { (void)dense_masked_attention(Q, K, V, combined, f.heads); });
        }
      } else {
        out << ",";
      }
      out << "\n" << std::flush;
    }
  });
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Museformer: fine- and coarse-grained attention for long symbolic music"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  IngestOptions ingest;
  auto* c_ingest = app.add_subcommand("ingest", "Convert a directory of MIDI files into a token corpus and manifest");
  c_ingest->add_option("--input", ingest.input, "Directory searched recursively for .mid/.midi files")->required();
  c_ingest->add_option("--output", ingest.output, "Output directory: manifest.jsonl, corpus.tok, corpus.spans, vocab.json")->required();
  c_ingest->add_option("--rules", ingest.rules, "JSON file overriding filter rules");
  c_ingest->add_option("--mapping", ingest.mapping, "Program-to-role overrides, lines of '<lo>[-<hi>] <role>'");
  c_ingest->add_option("--jobs", ingest.jobs, "Worker threads")->check(CLI::Range(1, 64));

  SynthOptions synth;
  auto* c_synth = app.add_subcommand("synth", "Write a synthetic corpus with planted bar repetition");
  c_synth->add_option("--songs", synth.songs, "Number of songs");
  c_synth->add_option("--bars", synth.bars, "Bars per song");
  c_synth->add_option("--period", synth.period, "Bar i repeats bar i - period");
  c_synth->add_option("--seed", synth.seed, "Random seed");
  c_synth->add_option("--output", synth.output, "Token file; the .spans sidecar is written next to it")->required();
  c_synth->add_option("--midi-dir", synth.midi_dir, "Also write each song as a MIDI file here");

  std::string tm_corpus, tm_output;
  std::size_t tm_song = 0;
  auto* c_to_midi = app.add_subcommand("to-midi", "Decode one song of a token corpus to MIDI");
  c_to_midi->add_option("--corpus", tm_corpus, "Token file")->required();
  c_to_midi->add_option("--song", tm_song, "Song index");
  c_to_midi->add_option("--output", tm_output, "MIDI file to write")->required();

  std::string st_corpus, st_output;
  SimilarityFlags st_flags;
  auto* c_stats = app.add_subcommand("stats", "Bar-pair similarity distribution L_t of a corpus as CSV (t,L_t,count)");
  c_stats->add_option("--corpus", st_corpus, "Token file")->required();
  c_stats->add_option("--track", st_flags.track, "Track role, or 'all'");
  c_stats->add_option("--horizon", st_flags.horizon, "Largest bar interval t");
  c_stats->add_flag("--both-empty-as-one", st_flags.both_empty_as_one, "Count two empty bars as similarity 1");
  c_stats->add_flag("--per-song-mean", st_flags.per_song_mean, "Average per-song means instead of pooling pairs");
  c_stats->add_option("--output", st_output, "CSV file (default stdout)");

  std::string sb_distribution;
  int sb_k = 8, sb_max_offset = 32;
  bool sb_paper = false;
  auto* c_select = app.add_subcommand("select-bars", "Choose structure-related bar offsets from a distribution CSV");
  c_select->add_option("--distribution", sb_distribution, "CSV written by stats");
  c_select->add_option("--k", sb_k, "Number of offsets")->check(CLI::PositiveNumber);
  c_select->add_option("--max-offset", sb_max_offset, "Largest offset considered")->check(CLI::PositiveNumber);
  c_select->add_flag("--use-paper-default", sb_paper, "Print the default selection 1,2,4,8,12,16,24,32");

  LayoutFlags lf;
  auto* c_layout = app.add_subcommand("layout", "Build the attention layout of one song and print its statistics");
  c_layout->add_option("--corpus", lf.corpus, "Token file");
  c_layout->add_option("--song", lf.song, "Song index within the corpus");
  c_layout->add_option("--bars", lf.bars, "Synthetic song: bar count (instead of --corpus)");
  c_layout->add_option("--bar-length", lf.bar_length, "Synthetic song: tokens per bar");
  c_layout->add_option("--selection", lf.selection, "Comma-separated bar offsets (default 1,2,4,8,12,16,24,32)");
  c_layout->add_option("--block-size", lf.block_size, "Block size for the blocksparse layout");
  c_layout->add_option("--dump", lf.dump, "Write <prefix>.pbm and <prefix>.blocks");
  c_layout->add_flag("--interleaved", lf.interleaved, "Place each summary right after its bar instead of first");
  c_layout->add_flag("--no-coarse", lf.no_coarse, "Drop attention to summaries of unselected bars");
  c_layout->add_flag("--related-summaries", lf.related_summaries, "Also attend to summaries of selected bars");

  TrainFlags tf;
  auto* c_train = app.add_subcommand("train", "Train a model; writes the best checkpoint and a CSV log");
  c_train->add_option("--train", tf.train, "Training token file")->required();
  c_train->add_option("--valid", tf.valid, "Validation token file");
  c_train->add_option("--config", tf.config, "JSON with optional 'model' and 'train' objects");
  c_train->add_option("--output", tf.output, "Checkpoint to write")->required();
  c_train->add_option("--log", tf.log, "CSV training log");
  c_train->add_option("--precision", tf.precision, "float or double")->check(CLI::IsMember({"float", "double"}));
  c_train->add_option("--init-seed", tf.init_seed, "Parameter initialization seed");
  c_train->add_option("--layers", tf.layers, "Override: layer count");
  c_train->add_option("--d-model", tf.d_model, "Override: model width");
  c_train->add_option("--heads", tf.heads, "Override: attention heads");
  c_train->add_option("--ffn", tf.ffn, "Override: feed-forward hidden width");
  c_train->add_option("--max-bars", tf.max_bars, "Override: bar embedding table size; longer songs are truncated");
  c_train->add_option("--selection", tf.selection, "Override: structure-related bar offsets");
  c_train->add_option("--norm", tf.norm, "Override: pre or post")->check(CLI::IsMember({"pre", "post"}));
  c_train->add_flag("--no-coarse", tf.no_coarse, "Disable coarse-grained attention");
  c_train->add_option("--steps", tf.steps, "Override: optimizer steps");
  c_train->add_option("--warmup", tf.warmup, "Override: warmup steps");
  c_train->add_option("--batch", tf.batch, "Override: songs per step");
  c_train->add_option("--valid-every", tf.valid_every, "Override: steps between validations");
  c_train->add_option("--patience", tf.patience, "Override: validations without improvement before stopping");
  c_train->add_option("--lr", tf.lr, "Override: peak learning rate");
  c_train->add_option("--seed", tf.seed, "Override: batch order seed");
  c_train->add_option("--max-tokens", tf.max_tokens, "Override: crop songs to this many tokens");

  GenerateFlags gf;
  auto* c_generate = app.add_subcommand("generate", "Sample pieces from a checkpoint");
  c_generate->add_option("--checkpoint", gf.checkpoint, "Checkpoint file")->required();
  c_generate->add_option("--output", gf.output, "Token file to write")->required();
  c_generate->add_option("--count", gf.count, "Number of pieces; piece i uses seed + i");
  c_generate->add_option("--top-k", gf.top_k, "Top-k sampling")->check(CLI::PositiveNumber);
  c_generate->add_option("--max-len", gf.max_len, "Maximum music tokens per piece");
  c_generate->add_option("--min-len", gf.min_len, "EOS is banned before this many tokens");
  c_generate->add_option("--seed", gf.seed, "Base seed");
  c_generate->add_option("--prompt", gf.prompt, "Token file whose first song is continued");
  c_generate->add_option("--prompt-bars", gf.prompt_bars, "Keep only this many prompt bars");
  c_generate->add_option("--midi-dir", gf.midi_dir, "Also write each piece as a MIDI file here");
  c_generate->add_option("--jobs", gf.jobs, "Worker threads")->check(CLI::Range(1, 64));

  std::string ep_checkpoint, ep_corpus, ep_lengths = "1024,5120,10240", ep_output;
  auto* c_ppl = app.add_subcommand("eval-ppl", "Perplexity at prefix lengths, pooled over tokens, as CSV");
  c_ppl->add_option("--checkpoint", ep_checkpoint, "Checkpoint file")->required();
  c_ppl->add_option("--corpus", ep_corpus, "Token file")->required();
  c_ppl->add_option("--lengths", ep_lengths, "Comma-separated prefix lengths");
  c_ppl->add_option("--output", ep_output, "CSV file (default stdout)");

  std::string se_generated, se_reference, se_dump;
  SimilarityFlags se_flags;
  auto* c_se = app.add_subcommand("eval-se", "Similarity error between two corpora");
  c_se->add_option("--generated", se_generated, "Token file")->required();
  c_se->add_option("--reference", se_reference, "Token file")->required();
  c_se->add_option("--track", se_flags.track, "Track role, or 'all'");
  c_se->add_option("--horizon", se_flags.horizon, "Largest bar interval t");
  c_se->add_flag("--both-empty-as-one", se_flags.both_empty_as_one, "Count two empty bars as similarity 1");
  c_se->add_flag("--per-song-mean", se_flags.per_song_mean, "Average per-song means instead of pooling pairs");
  c_se->add_option("--dump", se_dump, "Write both distributions as <prefix>.{generated,reference}.csv");

  BenchFlags bf;
  auto* c_bench = app.add_subcommand("bench-scaling", "Allowed pairs and wall time vs song length, as CSV");
  c_bench->add_option("--bars", bf.bars, "Comma-separated bar counts");
  c_bench->add_option("--bar-length", bf.bar_length, "Tokens per bar");
  c_bench->add_option("--selection", bf.selection, "Comma-separated bar offsets");
  c_bench->add_option("--d-model", bf.d_model, "Model width");
  c_bench->add_option("--heads", bf.heads, "Attention heads");
  c_bench->add_option("--repeats", bf.repeats, "Timing repeats; the fastest is reported");
  c_bench->add_option("--dense-max-bars", bf.dense_max_bars, "Skip the dense reference above this bar count");
  c_bench->add_flag("--no-timing", bf.no_timing, "Pair counts only; output is then reproducible");
  c_bench->add_option("--seed", bf.seed, "Seed for the random states");
  c_bench->add_option("--output", bf.output, "CSV file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*c_ingest) return run_ingest(ingest);
    if (*c_synth) return run_synth(synth);
    if (*c_to_midi) return run_to_midi(tm_corpus, tm_song, tm_output);
    if (*c_stats) return run_stats(st_corpus, st_flags, st_output);
    if (*c_select) return run_select_bars(sb_distribution, sb_k, sb_max_offset, sb_paper);
    if (*c_layout) return run_layout(lf);
    if (*c_train) return run_train(tf, *c_train);
    if (*c_generate) return run_generate(gf);
    if (*c_ppl) return run_eval_ppl(ep_checkpoint, ep_corpus, ep_lengths, ep_output);
    if (*c_se) return run_eval_se(se_generated, se_reference, se_flags, se_dump);
    if (*c_bench) return run_bench(bf);
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const CorpusFormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
