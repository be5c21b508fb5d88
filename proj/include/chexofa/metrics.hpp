#pragma once

#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "chexofa/finding.hpp"
#include "chexofa/tensor.hpp"
#include "chexofa/tokenizer.hpp"

namespace cxo {

// ---------------------------------------------------------------------------
// Rule-based findings labeler over the closed synthetic vocabulary.
// ---------------------------------------------------------------------------

/// Positive findings asserted in `text`. A keyword counts when no negation
/// cue ("no", "without", "absence of", "negative for", "resolved",
/// "free of") precedes it in its sentence; modifiers come from the nearest
/// laterality/severity words in the same sentence. A kind asserted anywhere
/// wins over negations elsewhere. The normal-study phrase yields
/// {no_finding} unless something else is asserted.
LabelSet rule_label(std::string_view text);

/// (entity, modifier) pairs; modifiers are laterality or severity names.
using GraphSet = std::set<std::pair<Kind, std::string>>;

GraphSet graph_from_labels(const LabelSet& labels);
GraphSet graph_extract(std::string_view text);

// ---------------------------------------------------------------------------
// Scores. All corpus-level functions return values in [0, 100].
// ---------------------------------------------------------------------------

/// Lowercased whitespace tokens.
std::vector<std::string> metric_tokens(std::string_view text);

/// Corpus BLEU-4 with brevity penalty; add-one smoothing on n >= 2 counts.
double bleu4(std::span<const std::string> hypotheses, std::span<const std::string> references);

/// LCS F-measure of one pair in [0, 1] (beta weights recall).
double rouge_l_pair(std::string_view hypothesis, std::string_view reference, double beta = 1.2);
double rouge_l(std::span<const std::string> hypotheses, std::span<const std::string> references);

/// Greedy cosine matching over token embeddings (Bertscore stand-in).
double semsim_f1(std::span<const int> hypothesis, std::span<const int> reference, const Matrix& embeddings);

/// Micro F1 over (study, kind, laterality) items.
double f1_findings(std::span<const LabelSet> predicted, std::span<const LabelSet> reference);

/// Pair F1 of one study in [0, 100]; both empty scores 100.
double f1_graph_pair(const GraphSet& hypothesis, const GraphSet& reference);
double f1_graph(std::span<const GraphSet> hypotheses, std::span<const GraphSet> references);

struct MetricReport {
  double bleu4 = 0;
  double rouge_l = 0;
  double semsim_f1 = 0;
  double f1_findings = 0;
  double f1_graph = 0;
};

struct StudyScore {
  std::string id;
  double rouge_l = 0;
  double semsim_f1 = 0;
  double f1_graph = 0;
  bool labels_match = false;
};

/// All five metrics for a prediction/reference corpus. `embeddings` may be
/// empty, in which case semsim_f1 is reported as 0.
MetricReport evaluate_corpus(std::span<const std::string> ids, std::span<const std::string> hypotheses,
                             std::span<const std::string> references, const BpeTokenizer* tokenizer,
                             const Matrix& embeddings, std::vector<StudyScore>* per_study = nullptr);

std::string to_json(const MetricReport& r);
MetricReport metric_report_from_json(const std::string& text);

}  // namespace cxo
