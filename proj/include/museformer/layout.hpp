#pragma once

// Boolean attention layouts for the two FC-Attention steps and their
// block-sparse view.
//
// Index space: a song with b bars and n music tokens has b + n tokens. In the
// summary-first arrangement summary i sits at index i and music token j at
// b + j; in the interleaved arrangement each bar's music tokens are followed
// by its summary token.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <istream>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <shared_mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "museformer/bar_selection.hpp"
#include "museformer/tokenizer.hpp"

namespace museformer {

enum class Arrangement : std::uint8_t { summary_first, interleaved };

struct LayoutSpec {
  std::vector<int> bar_lengths;  // music tokens per bar
  BarSelection selection = BarSelection::paper_default();
  Arrangement arrangement = Arrangement::summary_first;
  // Coarse-grained attention to summaries of the remaining previous bars.
  bool coarse = true;
  // Also attend the summaries of structure-related bars.
  bool include_related_summaries = false;

  static LayoutSpec from_token_seq(const TokenSeq& seq, BarSelection selection = BarSelection::paper_default()) {
    LayoutSpec s;
    for (const auto& span : seq.bar_spans) s.bar_lengths.push_back(static_cast<int>(span.size()));
    s.selection = std::move(selection);
    return s;
  }

  std::size_t bar_count() const { return bar_lengths.size(); }
  std::size_t music_count() const {
    std::size_t n = 0;
    for (int l : bar_lengths) n += static_cast<std::size_t>(l);
    return n;
  }
  std::size_t total() const { return bar_count() + music_count(); }

  void validate() const {
    for (int l : bar_lengths)
      if (l < 0) throw std::invalid_argument("layout spec: negative bar length");
  }
};

/// Precomputed index arithmetic for a LayoutSpec.
class LayoutGeometry {
 public:
  explicit LayoutGeometry(const LayoutSpec& spec) : arrangement_(spec.arrangement) {
    spec.validate();
    bars_ = spec.bar_count();
    bar_begin_.reserve(bars_ + 1);
    std::size_t acc = 0;
    for (int l : spec.bar_lengths) {
      bar_begin_.push_back(acc);
      acc += static_cast<std::size_t>(l);
    }
    bar_begin_.push_back(acc);
    music_ = acc;
    bar_of_.resize(music_);
    for (std::size_t b = 0; b < bars_; ++b)
      for (std::size_t j = bar_begin_[b]; j < bar_begin_[b + 1]; ++j) bar_of_[j] = b;
  }

  std::size_t bars() const { return bars_; }
  std::size_t music() const { return music_; }
  std::size_t total() const { return bars_ + music_; }
  std::size_t bar_begin(std::size_t bar) const { return bar_begin_[bar]; }
  std::size_t bar_end(std::size_t bar) const { return bar_begin_[bar + 1]; }
  std::size_t bar_of(std::size_t music) const { return bar_of_[music]; }

  std::size_t summary_index(std::size_t bar) const {
    return arrangement_ == Arrangement::summary_first ? bar : bar_begin_[bar + 1] + bar;
  }
  std::size_t music_index(std::size_t j) const {
    return arrangement_ == Arrangement::summary_first ? bars_ + j : j + bar_of_[j];
  }

 private:
  Arrangement arrangement_;
  std::size_t bars_ = 0;
  std::size_t music_ = 0;
  std::vector<std::size_t> bar_begin_;
  std::vector<std::size_t> bar_of_;
};

/// Row-major boolean matrix: allowed(q, s) means query q may attend source s.
class BoolLayout {
 public:
  BoolLayout() = default;
  BoolLayout(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), words_((cols + 63) / 64), bits_(rows * words_, 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  bool allowed(std::size_t r, std::size_t c) const { return (bits_[r * words_ + c / 64] >> (c % 64)) & 1U; }
  void set(std::size_t r, std::size_t c, bool v = true) {
    auto& w = bits_[r * words_ + c / 64];
    const std::uint64_t mask = std::uint64_t{1} << (c % 64);
    w = v ? (w | mask) : (w & ~mask);
  }
  void set_range(std::size_t r, std::size_t begin, std::size_t end) {
    for (std::size_t c = begin; c < end; ++c) set(r, c);
  }

  std::size_t row_count(std::size_t r) const {
    std::size_t n = 0;
    for (std::size_t w = 0; w < words_; ++w) n += static_cast<std::size_t>(std::popcount(bits_[r * words_ + w]));
    return n;
  }

  /// Allowed source columns of row r, ascending.
  template <typename F>
  void for_each_in_row(std::size_t r, F&& f) const {
    for (std::size_t w = 0; w < words_; ++w) {
      std::uint64_t word = bits_[r * words_ + w];
      while (word) {
        int bit = std::countr_zero(word);
        f(w * 64 + static_cast<std::size_t>(bit));
        word &= word - 1;
      }
    }
  }

  friend bool operator==(const BoolLayout&, const BoolLayout&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t words_ = 0;
  std::vector<std::uint64_t> bits_;
};

/// Summary query i attends the music tokens of bar i and itself.
inline BoolLayout build_summary_layout(const LayoutSpec& spec) {
  LayoutGeometry g(spec);
  BoolLayout layout(g.bars(), g.total());
  for (std::size_t i = 0; i < g.bars(); ++i) {
    for (std::size_t j = g.bar_begin(i); j < g.bar_end(i); ++j) layout.set(i, g.music_index(j));
    layout.set(i, g.summary_index(i));
  }
  return layout;
}

/// Music query x_{i,j} attends every token of the structure-related bars,
/// the causal prefix of bar i, and the summaries of the other previous bars.
inline BoolLayout build_aggregation_layout(const LayoutSpec& spec) {
  LayoutGeometry g(spec);
  BoolLayout layout(g.music(), g.total());
  const auto& offsets = spec.selection.offsets();
  for (std::size_t q = 0; q < g.music(); ++q) {
    const std::size_t bar = g.bar_of(q);
    for (int o : offsets) {
      if (static_cast<std::size_t>(o) > bar) break;
      const std::size_t related = bar - static_cast<std::size_t>(o);
      for (std::size_t j = g.bar_begin(related); j < g.bar_end(related); ++j) layout.set(q, g.music_index(j));
    }
    for (std::size_t j = g.bar_begin(bar); j <= q; ++j) layout.set(q, g.music_index(j));
    if (!spec.coarse) continue;
    for (std::size_t prev = 0; prev < bar; ++prev) {
      if (!spec.include_related_summaries && spec.selection.contains(static_cast<int>(bar - prev))) continue;
      layout.set(q, g.summary_index(prev));
    }
  }
  return layout;
}

/// Square layout over all b + n tokens: summary rows from the summarization
/// step, music rows from the aggregation step, in the spec's arrangement.
inline BoolLayout build_combined_layout(const LayoutSpec& spec) {
  LayoutGeometry g(spec);
  BoolLayout summary = build_summary_layout(spec);
  BoolLayout aggregation = build_aggregation_layout(spec);
  BoolLayout layout(g.total(), g.total());
  for (std::size_t i = 0; i < g.bars(); ++i)
    summary.for_each_in_row(i, [&](std::size_t c) { layout.set(g.summary_index(i), c); });
  for (std::size_t j = 0; j < g.music(); ++j)
    aggregation.for_each_in_row(j, [&](std::size_t c) { layout.set(g.music_index(j), c); });
  return layout;
}

/// For each summary-first index, its position in the interleaved arrangement.
inline std::vector<std::size_t> interleaved_positions(const LayoutSpec& spec) {
  LayoutSpec inter = spec;
  inter.arrangement = Arrangement::interleaved;
  LayoutGeometry g(inter);
  std::vector<std::size_t> perm(g.total());
  for (std::size_t i = 0; i < g.bars(); ++i) perm[i] = g.summary_index(i);
  for (std::size_t j = 0; j < g.music(); ++j) perm[g.bars() + j] = g.music_index(j);
  return perm;
}

/// out(row_map[r], col_map[c]) = in(r, c).
inline BoolLayout permute(const BoolLayout& in, const std::vector<std::size_t>& row_map,
                          const std::vector<std::size_t>& col_map) {
  if (row_map.size() != in.rows() || col_map.size() != in.cols())
    throw std::invalid_argument("permute: map size does not match layout");
  BoolLayout out(in.rows(), in.cols());
  for (std::size_t r = 0; r < in.rows(); ++r)
    in.for_each_in_row(r, [&](std::size_t c) { out.set(row_map[r], col_map[c]); });
  return out;
}

// ---------------------------------------------------------------------------
// Block sparsity

struct BlockLayout {
  std::size_t block_size = 32;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::pair<std::size_t, std::size_t>> kept_blocks;  // row-major

  std::size_t block_rows() const { return (rows + block_size - 1) / block_size; }
  std::size_t block_cols() const { return (cols + block_size - 1) / block_size; }

  /// Fraction of the layout area covered by kept blocks.
  double density() const {
    if (rows == 0 || cols == 0) return 0.0;
    return static_cast<double>(kept_blocks.size()) * static_cast<double>(block_size * block_size) /
           (static_cast<double>(rows) * static_cast<double>(cols));
  }
  friend bool operator==(const BlockLayout&, const BlockLayout&) = default;
};

/// Keeps exactly the block_size x block_size tiles holding an allowed cell.
inline BlockLayout blocksparsify(const BoolLayout& layout, std::size_t block_size = 32) {
  if (block_size < 1) throw std::invalid_argument("blocksparsify: block size must be >= 1");
  BlockLayout out;
  out.block_size = block_size;
  out.rows = layout.rows();
  out.cols = layout.cols();
  const std::size_t bcols = out.block_cols();
  std::vector<char> mark(bcols);
  for (std::size_t br = 0; br < out.block_rows(); ++br) {
    std::fill(mark.begin(), mark.end(), 0);
    const std::size_t row_end = std::min(layout.rows(), (br + 1) * block_size);
    for (std::size_t r = br * block_size; r < row_end; ++r)
      layout.for_each_in_row(r, [&](std::size_t c) { mark[c / block_size] = 1; });
    for (std::size_t bc = 0; bc < bcols; ++bc)
      if (mark[bc]) out.kept_blocks.emplace_back(br, bc);
  }
  return out;
}

struct LayoutStats {
  std::uint64_t allowed_pairs = 0;
  std::uint64_t per_query_max = 0;
};

inline LayoutStats layout_stats(const BoolLayout& layout) {
  LayoutStats s;
  for (std::size_t r = 0; r < layout.rows(); ++r) {
    std::uint64_t c = layout.row_count(r);
    s.allowed_pairs += c;
    s.per_query_max = std::max(s.per_query_max, c);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Compressed rows, the form the attention kernels iterate.

struct SourceLists {
  std::vector<std::uint32_t> offsets{0};  // rows + 1 entries
  std::vector<std::uint32_t> sources;

  std::size_t rows() const { return offsets.size() - 1; }
  std::size_t nnz() const { return sources.size(); }
  std::size_t row_size(std::size_t r) const { return offsets[r + 1] - offsets[r]; }

  static SourceLists from_layout(const BoolLayout& layout) {
    SourceLists s;
    s.offsets.reserve(layout.rows() + 1);
    for (std::size_t r = 0; r < layout.rows(); ++r) {
      layout.for_each_in_row(r, [&](std::size_t c) { s.sources.push_back(static_cast<std::uint32_t>(c)); });
      s.offsets.push_back(static_cast<std::uint32_t>(s.sources.size()));
    }
    return s;
  }
};

/// Both layouts of one sample in compute (summary-first) order.
struct LayoutBundle {
  LayoutSpec spec;
  BoolLayout summary;
  BoolLayout aggregation;
  SourceLists summary_rows;
  SourceLists aggregation_rows;

  static LayoutBundle build(LayoutSpec spec) {
    if (spec.arrangement != Arrangement::summary_first)
      throw std::invalid_argument("compute layouts require the summary-first arrangement");
    LayoutBundle b;
    b.summary = build_summary_layout(spec);
    b.aggregation = build_aggregation_layout(spec);
    b.summary_rows = SourceLists::from_layout(b.summary);
    b.aggregation_rows = SourceLists::from_layout(b.aggregation);
    b.spec = std::move(spec);
    return b;
  }
};

/// Layouts keyed by bar-length profile and attention options. Lookups take a
/// shared lock; insertion is exclusive.
class LayoutCache {
 public:
  std::shared_ptr<const LayoutBundle> get(const LayoutSpec& spec) {
    const std::string k = key(spec);
    {
      std::shared_lock lock(mutex_);
      if (auto it = entries_.find(k); it != entries_.end()) return it->second;
    }
    auto bundle = std::make_shared<const LayoutBundle>(LayoutBundle::build(spec));
    std::unique_lock lock(mutex_);
    auto [it, inserted] = entries_.emplace(k, std::move(bundle));
    return it->second;
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
  }

  void clear() {
    std::unique_lock lock(mutex_);
    entries_.clear();
  }

  static std::string key(const LayoutSpec& spec) {
    std::ostringstream k;
    k << static_cast<int>(spec.arrangement) << spec.coarse << spec.include_related_summaries << '|'
      << spec.selection.str() << '|';
    for (int l : spec.bar_lengths) k << l << ',';
    return k.str();
  }

 private:
  mutable std::shared_mutex mutex_;
  std::map<std::string, std::shared_ptr<const LayoutBundle>> entries_;
};

// ---------------------------------------------------------------------------
// Export formats

/// Binary PBM (P4): `P4\n<cols> <rows>\n` then rows packed MSB first,
/// each row padded to a whole byte. Allowed cells are black (1).
inline void write_pbm(std::ostream& out, const BoolLayout& layout) {
  out << "P4\n" << layout.cols() << " " << layout.rows() << "\n";
  const std::size_t row_bytes = (layout.cols() + 7) / 8;
  std::vector<unsigned char> row(row_bytes);
  for (std::size_t r = 0; r < layout.rows(); ++r) {
    std::fill(row.begin(), row.end(), 0);
    layout.for_each_in_row(r, [&](std::size_t c) { row[c / 8] |= static_cast<unsigned char>(0x80 >> (c % 8)); });
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row_bytes));
  }
}

inline BoolLayout read_pbm(std::istream& in) {
  std::string magic;
  std::size_t cols = 0, rows = 0;
  if (!(in >> magic) || magic != "P4") throw std::invalid_argument("PBM: expected P4 header");
  if (!(in >> cols >> rows)) throw std::invalid_argument("PBM: bad dimensions");
  in.get();
  BoolLayout layout(rows, cols);
  const std::size_t row_bytes = (cols + 7) / 8;
  std::vector<unsigned char> row(row_bytes);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row_bytes)))
      throw std::invalid_argument("PBM: truncated raster");
    for (std::size_t c = 0; c < cols; ++c)
      if (row[c / 8] & (0x80 >> (c % 8))) layout.set(r, c);
  }
  return layout;
}

/// Text list: `block_size <n>`, `shape <rows> <cols>`, then one `row col` per kept block.
inline void write_block_list(std::ostream& out, const BlockLayout& blocks) {
  out << "block_size " << blocks.block_size << "\n";
  out << "shape " << blocks.rows << " " << blocks.cols << "\n";
  for (const auto& [r, c] : blocks.kept_blocks) out << r << " " << c << "\n";
}

inline BlockLayout read_block_list(std::istream& in) {
  BlockLayout b;
  std::string word;
  if (!(in >> word >> b.block_size) || word != "block_size") throw std::invalid_argument("block list: missing block_size");
  if (!(in >> word >> b.rows >> b.cols) || word != "shape") throw std::invalid_argument("block list: missing shape");
  std::size_t r = 0, c = 0;
  while (in >> r >> c) b.kept_blocks.emplace_back(r, c);
  return b;
}

}  // namespace museformer
