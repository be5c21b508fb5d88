#include "chexofa/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "chexofa/errors.hpp"

namespace cxo {
namespace {

const std::vector<std::string> kSpecialNames = {"<PAD>", "<BOS>", "<EOS>", "<SEP>", "<UNK>"};

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case ' ': out += "\\s"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (++i == s.size()) throw FormatError("tokenizer: dangling escape in '" + s + "'");
    switch (s[i]) {
      case '\\': out += '\\'; break;
      case 's': out += ' '; break;
      case 'n': out += '\n'; break;
      case 't': out += '\t'; break;
      case 'r': out += '\r'; break;
      default: throw FormatError(std::string("tokenizer: unknown escape \\") + s[i]);
    }
  }
  return out;
}

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

// Merges every non-overlapping occurrence of `rule`, scanning left to right.
void merge_pair(std::vector<std::string>& symbols, const MergeRule& rule) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size();) {
    if (i + 1 < symbols.size() && symbols[i] == rule.first && symbols[i + 1] == rule.second) {
      out.push_back(symbols[i] + symbols[i + 1]);
      i += 2;
    } else {
      out.push_back(std::move(symbols[i]));
      ++i;
    }
  }
  symbols = std::move(out);
}

}  // namespace

std::vector<std::vector<std::string>> split_words(std::string_view text) {
  std::vector<std::vector<std::string>> words;
  if (text.empty()) return words;
  std::size_t start = 0;
  bool first = true;
  while (true) {
    const auto end = text.find(' ', start);
    const auto word = text.substr(start, end == std::string_view::npos ? text.size() - start : end - start);
    std::vector<std::string> symbols;
    for (std::size_t i = 0; i < word.size();) {
      const auto n = std::min(utf8_length(static_cast<unsigned char>(word[i])), word.size() - i);
      symbols.emplace_back(word.substr(i, n));
      i += n;
    }
    if (!first) {
      if (symbols.empty()) {
        symbols.emplace_back(kWordStart);
      } else {
        symbols.front().insert(0, kWordStart);
      }
    }
    if (!symbols.empty()) words.push_back(std::move(symbols));
    first = false;
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return words;
}

BpeTokenizer::BpeTokenizer(std::vector<std::string> alphabet, std::vector<MergeRule> merges)
    : alphabet_(std::move(alphabet)), merges_(std::move(merges)) {
  build();
}

void BpeTokenizer::build() {
  rank_.clear();
  symbol_to_id_.clear();
  id_to_symbol_ = kSpecialNames;
  auto add = [this](const std::string& s) {
    if (symbol_to_id_.emplace(s, static_cast<int>(id_to_symbol_.size())).second) id_to_symbol_.push_back(s);
  };
  for (const auto& s : alphabet_) add(s);
  for (std::size_t i = 0; i < merges_.size(); ++i) {
    if (!rank_.emplace(merges_[i], static_cast<int>(i)).second) {
      throw FormatError("tokenizer: duplicate merge rule '" + merges_[i].first + " " + merges_[i].second + "'");
    }
    add(merges_[i].first + merges_[i].second);
  }
}

BpeTokenizer BpeTokenizer::train(std::span<const std::string> corpus, int num_merges) {
  if (corpus.empty()) throw ContractError("train_bpe: empty corpus");
  if (num_merges < 0) throw ContractError("train_bpe: num_merges must be >= 0");
  std::map<std::vector<std::string>, long> words;
  std::set<std::string> alphabet;
  for (const auto& text : corpus) {
    for (auto& w : split_words(text)) {
      for (const auto& s : w) alphabet.insert(s);
      ++words[std::move(w)];
    }
  }
  std::vector<std::pair<std::vector<std::string>, long>> state(words.begin(), words.end());
  std::vector<MergeRule> merges;
  for (int round = 0; round < num_merges; ++round) {
    std::map<MergeRule, long> counts;
    for (const auto& [symbols, freq] : state) {
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) counts[{symbols[i], symbols[i + 1]}] += freq;
    }
    if (counts.empty()) break;
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it) {
      if (it->second > best->second) best = it;  // strict: first (smallest) pair wins ties
    }
    merges.push_back(best->first);
    for (auto& [symbols, freq] : state) merge_pair(symbols, best->first);
  }
  return BpeTokenizer(std::vector<std::string>(alphabet.begin(), alphabet.end()), std::move(merges));
}

void BpeTokenizer::apply_merges(std::vector<std::string>& symbols) const {
  while (symbols.size() > 1) {
    int best_rank = -1;
    const MergeRule* best = nullptr;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = rank_.find({symbols[i], symbols[i + 1]});
      if (it != rank_.end() && (best_rank < 0 || it->second < best_rank)) {
        best_rank = it->second;
        best = &it->first;
      }
    }
    if (!best) break;
    merge_pair(symbols, *best);
  }
}

std::vector<std::string> BpeTokenizer::encode_symbols(std::string_view text) const {
  std::vector<std::string> out;
  for (auto& w : split_words(text)) {
    apply_merges(w);
    for (auto& s : w) out.push_back(std::move(s));
  }
  return out;
}

std::vector<int> BpeTokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  for (auto& w : split_words(text)) {
    apply_merges(w);
    for (const auto& s : w) {
      auto it = symbol_to_id_.find(s);
      if (it != symbol_to_id_.end()) {
        ids.push_back(it->second);
        continue;
      }
      // Unseen character: keep the word-start marker when it is known.
      if (s.starts_with(kWordStart) && s.size() > kWordStart.size()) {
        auto m = symbol_to_id_.find(std::string(kWordStart));
        if (m != symbol_to_id_.end()) ids.push_back(m->second);
      }
      ids.push_back(kUnkId);
    }
  }
  return ids;
}

std::string BpeTokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab_size()) throw IndexError("decode: unknown token id " + std::to_string(id));
    if (id < kNumSpecial) continue;
    const auto& s = id_to_symbol_[static_cast<std::size_t>(id)];
    std::size_t pos = 0;
    while (pos < s.size()) {
      if (s.compare(pos, kWordStart.size(), kWordStart) == 0) {
        out += ' ';
        pos += kWordStart.size();
      } else {
        out += s[pos++];
      }
    }
  }
  return out;
}

const std::string& BpeTokenizer::symbol(int id) const {
  if (id < 0 || id >= vocab_size()) throw IndexError("tokenizer: unknown token id " + std::to_string(id));
  return id_to_symbol_[static_cast<std::size_t>(id)];
}

int BpeTokenizer::id_of(const std::string& symbol) const {
  auto it = symbol_to_id_.find(symbol);
  return it == symbol_to_id_.end() ? kUnkId : it->second;
}

std::string BpeTokenizer::serialize() const {
  std::string out = "BPE v1\n";
  for (std::size_t i = 0; i < alphabet_.size(); ++i) {
    if (i) out += ' ';
    out += escape(alphabet_[i]);
  }
  out += '\n';
  for (const auto& [l, r] : merges_) out += escape(l) + ' ' + escape(r) + '\n';
  return out;
}

BpeTokenizer BpeTokenizer::parse(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "BPE v1") throw FormatError("tokenizer: missing 'BPE v1' header");
  if (!std::getline(is, line)) throw FormatError("tokenizer: missing alphabet line");
  std::vector<std::string> alphabet;
  for (const auto& tok : split_ws(line)) alphabet.push_back(unescape(tok));
  std::vector<MergeRule> merges;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto parts = split_ws(line);
    if (parts.size() != 2) throw FormatError("tokenizer: bad merge line '" + line + "'");
    merges.emplace_back(unescape(parts[0]), unescape(parts[1]));
  }
  return BpeTokenizer(std::move(alphabet), std::move(merges));
}

void BpeTokenizer::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write tokenizer " + path.string());
  f << serialize();
}

BpeTokenizer BpeTokenizer::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read tokenizer " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

}  // namespace cxo
