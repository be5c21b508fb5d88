#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "chexofa/config.hpp"
#include "chexofa/metrics.hpp"

namespace cxo {

/// Fine-tuning variants compared by the ablation.
enum class Variant { kFull, kScratch, kTextOnly };
std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);

/// Where every stage reads and writes, relative to one experiment root.
class Layout {
 public:
  explicit Layout(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path corpus() const { return root_ / "corpus"; }
  std::filesystem::path tokenizer_dir() const { return root_ / "tokenizer"; }
  std::filesystem::path tokenizer_file() const { return tokenizer_dir() / "tokenizer.json"; }
  std::filesystem::path pretrain(std::uint64_t seed) const;
  std::filesystem::path finetune(Variant v, std::uint64_t seed) const;
  std::filesystem::path best_checkpoint(const std::filesystem::path& run) const { return run / "checkpoints" / "best.cxof"; }
  std::filesystem::path decode_dir(Variant v, std::uint64_t seed) const;
  std::filesystem::path predictions(Variant v, std::uint64_t seed, Split split, TaskKind task) const;
  std::filesystem::path evaluate_dir(const std::string& name) const { return root_ / "evaluate" / name; }
  std::filesystem::path ensemble_dir() const { return root_ / "ensemble"; }
  std::filesystem::path ablate_dir() const { return root_ / "ablate"; }

 private:
  std::filesystem::path root_;
};

/// Fails with MissingArtifactError naming the file and the subcommand that
/// produces it.
void require_artifact(const std::filesystem::path& path, std::string_view producer);

/// Every stage directory holds the resolved experiment config as experiment.json.
void write_resolved_config(const std::filesystem::path& dir, const ExperimentConfig& config);

/// 64-bit FNV-1a of a file's bytes, as 16 hex digits.
std::string file_checksum(const std::filesystem::path& path);

struct PipelineContext {
  ExperimentConfig config;
  Layout layout;
  std::ostream* log = nullptr;  // progress lines; may be null
};

// Stages, in dependency order.
void run_gen_data(const PipelineContext& ctx);
void run_train_bpe(const PipelineContext& ctx);
void run_pretrain(const PipelineContext& ctx, std::uint64_t seed);
void run_finetune(const PipelineContext& ctx, Variant variant, std::uint64_t seed);
/// Decodes `split` with the best fine-tuned checkpoint of (variant, seed).
std::filesystem::path run_decode(const PipelineContext& ctx, Variant variant, std::uint64_t seed, Split split,
                                 TaskKind task);

/// Scores a prediction file against `split` impressions. ClsRSum outputs are
/// scored on their impression part. Writes metrics.json and per_study.csv
/// under evaluate/<name>.
MetricReport run_evaluate(const PipelineContext& ctx, const std::filesystem::path& predictions, Split split,
                          const std::string& name);

struct EnsembleSummary {
  double tau = 0;
  MetricReport calibrated;
  MetricReport uncalibrated;
  int calibrated_studies = 0;
};

/// Full-variant members over config.ablate.seeds plus the ClsRSum decode of
/// the first seed; tau tuned on validation when ablate.tau_grid is non-empty.
EnsembleSummary run_ensemble_stage(const PipelineContext& ctx);

struct AblationRow {
  std::string name;
  double rouge_l = 0;
  double f1_findings = 0;
  double f1_graph = 0;
};

struct AblationReport {
  std::vector<AblationRow> rows;  // Ensemble, Ensemble-Calibration, Single, Text-only, -Pretraining
  std::map<std::string, MetricReport> per_run;  // "<variant>/seed<k>" and "ensemble", "ensemble_uncalibrated"
  double tau = 0;
};

std::string ablation_csv(const AblationReport& r);
std::string ablation_table(const AblationReport& r);

/// Every stage end to end with shared corpus and seeds.
AblationReport run_ablate(const PipelineContext& ctx);

/// Text comparison of every metrics.json under evaluate/, followed by the
/// ablation table when one exists.
std::string render_report(const Layout& layout);

}  // namespace cxo
