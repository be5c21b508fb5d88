#pragma once

#include <limits>
#include <map>
#include <random>
#include <vector>

#include "chexofa/decoding.hpp"

namespace cxo::testing {

// Fixed random log-probabilities for every prefix, drawn on first use.
class TableScorer : public StepScorer {
 public:
  TableScorer(int vocab, std::uint64_t seed) : vocab_(vocab), rng_(seed) {}
  int vocab_size() const override { return vocab_; }

  Matrix next_log_probs(std::span<const std::vector<int>> prefixes, std::span<const int>) override {
    Matrix out(static_cast<Eigen::Index>(prefixes.size()), vocab_);
    for (std::size_t i = 0; i < prefixes.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = row(prefixes[i]);
    return out;
  }

  const Eigen::RowVectorXd& row(const std::vector<int>& prefix) {
    auto it = table_.find(prefix);
    if (it != table_.end()) return it->second;
    std::normal_distribution<double> n(0.0, 1.5);
    Eigen::RowVectorXd logits(vocab_);
    for (int v = 0; v < vocab_; ++v) logits(v) = n(rng_);
    return table_.emplace(prefix, log_softmax_rows(logits)).first->second;
  }

 private:
  int vocab_;
  std::mt19937_64 rng_;
  std::map<std::vector<int>, Eigen::RowVectorXd> table_;
};

struct Best {
  std::vector<int> tokens;
  double score = -std::numeric_limits<double>::infinity();
};

// Every EOS-terminated sequence of length <= max_len.
inline void enumerate(TableScorer& s, std::vector<int>& prefix, double raw, int max_len, double alpha, Best& best) {
  const Eigen::RowVectorXd lp = s.row(prefix);
  for (int v = 0; v < s.vocab_size(); ++v) {
    const double r = raw + lp(v);
    const int len = static_cast<int>(prefix.size()) + 1;
    if (v == kEosId) {
      const double score = r / length_penalty(len, alpha);
      if (score > best.score) best = {prefix, score};
    } else if (len < max_len) {
      prefix.push_back(v);
      enumerate(s, prefix, r, max_len, alpha, best);
      prefix.pop_back();
    }
  }
}

}  // namespace cxo::testing
