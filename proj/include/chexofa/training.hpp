#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <span>
#include <string_view>
#include <vector>

#include "chexofa/adam.hpp"
#include "chexofa/model.hpp"
#include "chexofa/synthcxr.hpp"
#include "chexofa/tokenizer.hpp"

namespace cxo {

enum class TaskKind { kRGen, kRSum, kClsRSum };
std::string_view to_string(TaskKind t);
TaskKind parse_task_kind(std::string_view s);

inline constexpr std::string_view kRGenInstruction = "What does the image describe?";
inline constexpr std::string_view kRSumInstruction = "what is the summary of the following article?";
// Distinct from RSum so one jointly fine-tuned model can tell the tasks apart.
inline constexpr std::string_view kClsRSumInstruction = "what are the observations and summary of the following article?";
std::string_view instruction_text(TaskKind t);

/// One supervised example. target_ids runs BOS ... EOS.
struct TaskInstance {
  TaskKind task = TaskKind::kRSum;
  EncoderInput input;
  std::vector<int> target_ids;
};

/// Instructions, findings, impressions and serialized labels: every string
/// the models read or write.
std::vector<std::string> tokenizer_training_text(std::span<const StudyRecord> records);

/// Label serialization, SEP, impression: the ClsRSum target before BOS/EOS.
std::vector<int> cls_target_body(const StudyRecord& record, const BpeTokenizer& tokenizer);

/// Targets longer than the decoder window lose trailing content, never EOS.
TaskInstance make_instance(const StudyRecord& record, TaskKind task, const BpeTokenizer& tokenizer, int max_text_len,
                           bool text_only = false);

struct TrainConfig {
  int batch_size = 16;
  int pretrain_epochs = 5;
  int finetune_epochs = 5;
  std::array<double, 2> task_mix = {0.5, 0.5};  // RSum, ClsRSum
  std::uint64_t seed = 0;
  int eval_every = 0;  // steps between validation passes; 0 = end of each epoch
  bool text_only = false;
  bool skip_pretrain = false;
  AdamConfig adam;
  int warmup_steps = 200;
  int patience = 2;

  void validate() const;
};

/// Mean cross-entropy over all target tokens of the batch, teacher forced.
Var batch_loss(ForwardPass& pass, std::span<const TaskInstance> batch);

/// Token-weighted mean loss over `instances` in eval mode.
double evaluation_loss(const ModelConfig& config, const ModelParams& params, std::span<const TaskInstance> instances,
                       int batch_size);

/// Task drawn for each fine-tuning batch.
std::vector<TaskKind> finetune_schedule(const TrainConfig& config, std::int64_t batches);

struct TrainData {
  std::span<const StudyRecord> train;
  std::span<const StudyRecord> val;
  const BpeTokenizer* tokenizer = nullptr;
  std::ostream* progress = nullptr;
};

struct TrainResult {
  ModelParams best;
  ModelParams last;
  double initial_val_loss = 0;
  double best_val_loss = 0;
  std::int64_t steps = 0;
  bool stopped_early = false;
  std::map<TaskKind, std::int64_t> instances_built;
};

/// RGen only; best checkpoint by validation RGen loss. With an empty
/// `run_dir` nothing is written.
TrainResult pretrain(const ModelConfig& model_config, const ModelParams& init, const TrainData& data,
                     const TrainConfig& config, const std::filesystem::path& run_dir = {});

/// RSum / ClsRSum per task_mix; best checkpoint by validation RSum loss.
TrainResult finetune(const ModelConfig& model_config, const ModelParams& init, const TrainData& data,
                     const TrainConfig& config, const std::filesystem::path& run_dir = {});

}  // namespace cxo
