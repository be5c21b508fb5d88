#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cxo {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kUnkId = 4;
inline constexpr int kNumSpecial = 5;

/// Marks the first symbol of every word that followed a space ("▁").
inline constexpr std::string_view kWordStart = "\xE2\x96\x81";

using MergeRule = std::pair<std::string, std::string>;

/// Character-level byte-pair-encoding tokenizer.
///
/// Text is split on single spaces; each space becomes a word-start marker
/// fused onto the first character of the following word, so merges never
/// cross a word boundary and decoding is exact.
class BpeTokenizer {
 public:
  BpeTokenizer() = default;
  BpeTokenizer(std::vector<std::string> alphabet, std::vector<MergeRule> merges);

  /// Greedy most-frequent-pair merging. Ties go to the lexicographically
  /// smallest pair. Stops early once no adjacent pair is left.
  static BpeTokenizer train(std::span<const std::string> corpus, int num_merges);

  std::vector<std::string> encode_symbols(std::string_view text) const;
  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  int vocab_size() const { return static_cast<int>(id_to_symbol_.size()); }
  const std::string& symbol(int id) const;
  int id_of(const std::string& symbol) const;
  const std::vector<std::string>& alphabet() const { return alphabet_; }
  const std::vector<MergeRule>& merges() const { return merges_; }

  std::string serialize() const;
  static BpeTokenizer parse(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static BpeTokenizer load(const std::filesystem::path& path);

 private:
  void build();
  void apply_merges(std::vector<std::string>& symbols) const;

  std::vector<std::string> alphabet_;
  std::vector<MergeRule> merges_;
  std::map<MergeRule, int> rank_;
  std::unordered_map<std::string, int> symbol_to_id_;
  std::vector<std::string> id_to_symbol_;
};

/// Base symbols of `text` before any merge.
std::vector<std::vector<std::string>> split_words(std::string_view text);

}  // namespace cxo
