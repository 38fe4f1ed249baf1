#pragma once

#include <algorithm>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace museformer {

/// Offsets (in bars, looking back) of the structure-related bars a token
/// attends to at full granularity. Always positive, strictly increasing.
class BarSelection {
 public:
  BarSelection() = default;
  BarSelection(std::initializer_list<int> offsets) : BarSelection(std::vector<int>(offsets)) {}
  explicit BarSelection(std::vector<int> offsets) : offsets_(std::move(offsets)) {
    std::sort(offsets_.begin(), offsets_.end());
    offsets_.erase(std::unique(offsets_.begin(), offsets_.end()), offsets_.end());
    if (!offsets_.empty() && offsets_.front() <= 0) throw std::invalid_argument("bar offsets must be positive");
  }

  /// The previous 1st, 2nd, 4th, 8th, 12th, 16th, 24th and 32nd bars.
  static BarSelection paper_default() { return {1, 2, 4, 8, 12, 16, 24, 32}; }

  /// The `count` most recent bars: {1, ..., count}.
  static BarSelection recent(int count) {
    std::vector<int> v;
    for (int i = 1; i <= count; ++i) v.push_back(i);
    return BarSelection(std::move(v));
  }

  static BarSelection parse(const std::string& text) {
    std::vector<int> v;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, ',')) {
      if (item.empty()) continue;
      try {
        v.push_back(std::stoi(item));
      } catch (const std::exception&) {
        throw std::invalid_argument("bad bar offset '" + item + "'");
      }
    }
    return BarSelection(std::move(v));
  }

  const std::vector<int>& offsets() const { return offsets_; }
  std::size_t size() const { return offsets_.size(); }
  bool empty() const { return offsets_.empty(); }
  bool contains(int offset) const { return std::binary_search(offsets_.begin(), offsets_.end(), offset); }

  std::string str() const {
    std::string s;
    for (std::size_t i = 0; i < offsets_.size(); ++i) s += (i ? "," : "") + std::to_string(offsets_[i]);
    return s;
  }

  friend bool operator==(const BarSelection&, const BarSelection&) = default;

 private:
  std::vector<int> offsets_;
};

}  // namespace museformer
