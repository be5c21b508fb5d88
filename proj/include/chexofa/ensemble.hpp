#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "chexofa/decoding.hpp"
#include "chexofa/finding.hpp"
#include "chexofa/tensor.hpp"

namespace cxo {

struct EnsembleCandidate {
  std::string source;
  std::string text;
};

struct CandidateSet {
  std::string id;
  std::vector<EnsembleCandidate> candidates;

  void validate() const;
};

/// s_ij = f1_graph(text_i as hypothesis, text_j as reference).
Matrix mutual_similarity(const CandidateSet& cands);
Matrix mutual_similarity(std::span<const std::string> texts);

struct Selection {
  std::size_t index = 0;
  std::vector<double> row_means;  // off-diagonal means; 100 when M = 1
  bool tie = false;
};

/// Argmax of off-diagonal row means; exact ties drawn uniformly with `seed`.
Selection select_best(const Matrix& similarity, std::uint64_t seed);

struct CalibrationConfig {
  double tau = 60;
  bool enabled = true;
  std::uint64_t seed = 0;
  bool include_cls_candidate = true;  // ClsRSum impression joins the vote

  void validate() const;
};

struct EnsembleResult {
  std::size_t chosen = 0;
  std::vector<double> row_means;
  double confidence = 0;
  bool tie = false;
  std::string final_text;
  bool calibrated = false;
};

EnsembleResult ensemble_select(const CandidateSet& cands, std::uint64_t seed);

/// Kind and laterality agree; severity is ignored.
bool labels_match(const LabelSet& a, const LabelSet& b);

/// Swaps in `cls_text` when rule_label(final_text) disagrees with
/// `cls_labels` and confidence < tau.
EnsembleResult factual_calibrate(EnsembleResult result, const LabelSet& cls_labels, const std::string& cls_text,
                                 const CalibrationConfig& config);

struct EnsembleOutput {
  std::vector<Prediction> predictions;  // study-id order
  std::vector<std::string> ids;
  std::vector<EnsembleResult> results;
};

/// `members` are per-model prediction lists (any order); `cls` holds the
/// ClsRSum decodes. All must cover the same study ids.
EnsembleOutput run_ensemble(std::span<const std::vector<Prediction>> members, const std::vector<Prediction>& cls,
                            const CalibrationConfig& config);

void write_ensemble_log(const std::filesystem::path& path, const EnsembleOutput& out);

/// Threshold in `grid` maximizing f1_findings + f1_graph of the calibrated
/// output against `references` (id -> reference text); ties to the lowest.
double tune_tau(std::span<const std::vector<Prediction>> members, const std::vector<Prediction>& cls,
                const std::map<std::string, std::string>& references, CalibrationConfig config,
                std::span<const double> grid);

}  // namespace cxo
