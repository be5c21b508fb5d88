#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "chexofa/decoding.hpp"
#include "chexofa/ensemble.hpp"
#include "chexofa/model.hpp"
#include "chexofa/synthcxr.hpp"
#include "chexofa/training.hpp"
#include "json.hpp"

namespace cxo {

struct TokenizerConfig {
  int num_merges = 512;
};

struct AblationConfig {
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::vector<double> tau_grid = {0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100};
};

/// Every stage of a run. model.vocab_size = 0 means "take it from the tokenizer".
struct ExperimentConfig {
  std::string name = "experiment";
  std::string out_dir = "runs/experiment";
  CorpusConfig corpus;
  TokenizerConfig tokenizer;
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;
  CalibrationConfig ensemble;
  AblationConfig ablate;

  void validate() const;
};

using Json = nlohmann::ordered_json;

Json corpus_config_to_json(const CorpusConfig& c);
Json model_config_to_json(const ModelConfig& c);
Json train_config_to_json(const TrainConfig& c);
Json decode_config_to_json(const DecodeConfig& c);
Json calibration_config_to_json(const CalibrationConfig& c);
Json experiment_config_to_json(const ExperimentConfig& c);

/// Strict: unknown keys and wrongly typed values raise ConfigError; absent
/// keys keep their defaults.
CorpusConfig corpus_config_from_json(const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
DecodeConfig decode_config_from_json(const nlohmann::json& j);
CalibrationConfig calibration_config_from_json(const nlohmann::json& j);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

}  // namespace cxo
