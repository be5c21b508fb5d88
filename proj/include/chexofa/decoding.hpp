#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "chexofa/finding.hpp"
#include "chexofa/model.hpp"
#include "chexofa/tokenizer.hpp"

namespace cxo {

struct DecodeConfig {
  int beam_size = 4;
  double alpha = 0.6;
  int max_len = 128;
  std::uint64_t seed = 0;  // beam search is deterministic; kept for run echo

  void validate() const;
};

/// ((5 + length) / 6)^alpha.
double length_penalty(int length, double alpha);

/// Tokens exclude BOS and include EOS once finished.
struct BeamHypothesis {
  std::vector<int> tokens;
  double raw_logprob = 0;
  bool finished = false;
};

struct BeamResult {
  std::vector<int> tokens;  // EOS stripped
  double score = 0;         // raw_logprob / length_penalty(len incl. EOS)
  double raw_logprob = 0;
  bool finished = false;
};

/// Next-token log-probabilities for a set of hypotheses. Hypothesis i of a
/// call extends hypothesis parents[i] of the previous call by its last token;
/// the first call has empty prefixes and no parents.
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual int vocab_size() const = 0;
  virtual Matrix next_log_probs(std::span<const std::vector<int>> prefixes, std::span<const int> parents) = 0;
};

/// Row-wise log-softmax.
Matrix log_softmax_rows(const Matrix& logits);

class ModelScorer : public StepScorer {
 public:
  ModelScorer(const Model& model, const Memory& memory) : model_(model), decoder_(model, memory) {}
  int vocab_size() const override { return model_.config().vocab_size; }
  Matrix next_log_probs(std::span<const std::vector<int>> prefixes, std::span<const int> parents) override;

 private:
  const Model& model_;
  IncrementalDecoder decoder_;
};

/// Keeps the beam_size best of (new candidates + finished) by penalized
/// score each step; exact ties go to the lexicographically smaller token
/// sequence, i.e. the lower token id at the first difference.
BeamResult beam_search(StepScorer& scorer, const DecodeConfig& config);
BeamResult beam_search(const Model& model, const EncoderInput& input, const DecodeConfig& config);

/// Decoded text; the first SEP is rendered as " <SEP> ".
std::string render_output(const BpeTokenizer& tokenizer, std::span<const int> tokens);

inline constexpr std::string_view kSepText = "<SEP>";

/// Splits at the first SEP. A malformed or missing label segment yields
/// empty labels and the whole text as impression.
std::pair<LabelSet, std::string> parse_cls_output(const std::string& text);

struct Prediction {
  std::string id;
  std::string task;
  std::string prediction;
  double score = 0;
  std::optional<LabelSet> labels;  // ClsRSum only
};

std::string prediction_to_json(const Prediction& p);
Prediction prediction_from_json(const std::string& line);
void write_predictions(const std::filesystem::path& path, std::span<const Prediction> preds);
std::vector<Prediction> read_predictions(const std::filesystem::path& path);

}  // namespace cxo
