#include "chexofa/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "chexofa/errors.hpp"

namespace cxo {
namespace {

using nlohmann::json;

// Reads declared keys of one JSON object and rejects the rest.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + " must be an object");
  }

  void get(const char* key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(where(key) + " must be an integer");
      const auto x = v->get<std::int64_t>();
      if (x < INT32_MIN || x > INT32_MAX) throw ConfigError(where(key) + " out of range");
      out = static_cast<int>(x);
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<std::int64_t>() >= 0)) {
        throw ConfigError(where(key) + " must be a non-negative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + " must be a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + " must be true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  template <typename T>
  void get(const char* key, std::vector<T>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + " must be an array");
      std::vector<T> items;
      for (std::size_t i = 0; i < v->size(); ++i) {
        json wrap = json::object();
        wrap["x"] = (*v)[i];
        Fields f(wrap, where(key) + "[" + std::to_string(i) + "]");
        T item{};
        f.get("x", item);
        items.push_back(item);
      }
      out = std::move(items);
    }
  }
  template <typename T, typename Parse>
  void nested(const char* key, T& out, Parse parse) {
    if (const json* v = find(key)) out = parse(*v, where(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.contains(it.key())) throw ConfigError("unknown key " + where(it.key().c_str()));
    }
  }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string where(const char* key = nullptr) const {
    std::string p = path_.empty() ? "config" : path_;
    return key ? p + "." + key : p;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

CorpusConfig parse_corpus(const json& j, const std::string& path) {
  CorpusConfig c;
  Fields f(j, path);
  f.get("n_train", c.n_train);
  f.get("n_val", c.n_val);
  f.get("n_test", c.n_test);
  f.get("seed", c.seed);
  f.get("p_img_only", c.p_img_only);
  f.get("p_filler", c.p_filler);
  f.get("p_kind", c.p_kind);
  f.finish();
  return c;
}

ModelConfig parse_model(const json& j, const std::string& path) {
  ModelConfig c;
  Fields f(j, path);
  f.get("d", c.d);
  f.get("enc_layers", c.enc_layers);
  f.get("dec_layers", c.dec_layers);
  f.get("heads", c.heads);
  f.get("ffn_mult", c.ffn_mult);
  f.get("vocab_size", c.vocab_size);
  f.get("max_text_len", c.max_text_len);
  f.get("patch_rows", c.patch_rows);
  f.get("patch_cols", c.patch_cols);
  f.get("image_size", c.image_size);
  f.get("conv_channels", c.conv_channels);
  f.get("dropout", c.dropout);
  f.finish();
  return c;
}

AdamConfig parse_adam(const json& j, const std::string& path) {
  AdamConfig c;
  Fields f(j, path);
  f.get("lr", c.lr);
  f.get("beta1", c.beta1);
  f.get("beta2", c.beta2);
  f.get("eps", c.eps);
  f.finish();
  return c;
}

TrainConfig parse_train(const json& j, const std::string& path) {
  TrainConfig c;
  Fields f(j, path);
  f.get("batch_size", c.batch_size);
  f.get("pretrain_epochs", c.pretrain_epochs);
  f.get("finetune_epochs", c.finetune_epochs);
  std::vector<double> mix(c.task_mix.begin(), c.task_mix.end());
  f.get("task_mix", mix);
  if (mix.size() != 2) throw ConfigError(path + ".task_mix must hold two weights (rsum, cls_rsum)");
  c.task_mix = {mix[0], mix[1]};
  f.get("seed", c.seed);
  f.get("eval_every", c.eval_every);
  f.get("text_only", c.text_only);
  f.get("skip_pretrain", c.skip_pretrain);
  f.nested("adam", c.adam, parse_adam);
  f.get("warmup_steps", c.warmup_steps);
  f.get("patience", c.patience);
  f.finish();
  return c;
}

DecodeConfig parse_decode(const json& j, const std::string& path) {
  DecodeConfig c;
  Fields f(j, path);
  f.get("beam_size", c.beam_size);
  f.get("alpha", c.alpha);
  f.get("max_len", c.max_len);
  f.get("seed", c.seed);
  f.finish();
  return c;
}

CalibrationConfig parse_calibration(const json& j, const std::string& path) {
  CalibrationConfig c;
  Fields f(j, path);
  f.get("tau", c.tau);
  f.get("enabled", c.enabled);
  f.get("seed", c.seed);
  f.get("include_cls_candidate", c.include_cls_candidate);
  f.finish();
  return c;
}

TokenizerConfig parse_tokenizer(const json& j, const std::string& path) {
  TokenizerConfig c;
  Fields f(j, path);
  f.get("num_merges", c.num_merges);
  f.finish();
  return c;
}

AblationConfig parse_ablation(const json& j, const std::string& path) {
  AblationConfig c;
  Fields f(j, path);
  f.get("seeds", c.seeds);
  f.get("tau_grid", c.tau_grid);
  f.finish();
  return c;
}

}  // namespace

Json corpus_config_to_json(const CorpusConfig& c) {
  return Json{{"n_train", c.n_train}, {"n_val", c.n_val},   {"n_test", c.n_test}, {"seed", c.seed},
              {"p_img_only", c.p_img_only}, {"p_filler", c.p_filler}, {"p_kind", c.p_kind}};
}

Json model_config_to_json(const ModelConfig& c) {
  return Json{{"d", c.d},
              {"enc_layers", c.enc_layers},
              {"dec_layers", c.dec_layers},
              {"heads", c.heads},
              {"ffn_mult", c.ffn_mult},
              {"vocab_size", c.vocab_size},
              {"max_text_len", c.max_text_len},
              {"patch_rows", c.patch_rows},
              {"patch_cols", c.patch_cols},
              {"image_size", c.image_size},
              {"conv_channels", c.conv_channels},
              {"dropout", c.dropout}};
}

Json train_config_to_json(const TrainConfig& c) {
  return Json{{"batch_size", c.batch_size},
              {"pretrain_epochs", c.pretrain_epochs},
              {"finetune_epochs", c.finetune_epochs},
              {"task_mix", Json::array({c.task_mix[0], c.task_mix[1]})},
              {"seed", c.seed},
              {"eval_every", c.eval_every},
              {"text_only", c.text_only},
              {"skip_pretrain", c.skip_pretrain},
              {"adam", Json{{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
              {"warmup_steps", c.warmup_steps},
              {"patience", c.patience}};
}

Json decode_config_to_json(const DecodeConfig& c) {
  return Json{{"beam_size", c.beam_size}, {"alpha", c.alpha}, {"max_len", c.max_len}, {"seed", c.seed}};
}

Json calibration_config_to_json(const CalibrationConfig& c) {
  return Json{{"tau", c.tau}, {"enabled", c.enabled}, {"seed", c.seed}, {"include_cls_candidate", c.include_cls_candidate}};
}

Json experiment_config_to_json(const ExperimentConfig& c) {
  return Json{{"name", c.name},
              {"out_dir", c.out_dir},
              {"corpus", corpus_config_to_json(c.corpus)},
              {"tokenizer", Json{{"num_merges", c.tokenizer.num_merges}}},
              {"model", model_config_to_json(c.model)},
              {"train", train_config_to_json(c.train)},
              {"decode", decode_config_to_json(c.decode)},
              {"ensemble", calibration_config_to_json(c.ensemble)},
              {"ablate", Json{{"seeds", c.ablate.seeds}, {"tau_grid", c.ablate.tau_grid}}}};
}

CorpusConfig corpus_config_from_json(const json& j) { return parse_corpus(j, "corpus"); }
ModelConfig model_config_from_json(const json& j) { return parse_model(j, "model"); }
TrainConfig train_config_from_json(const json& j) { return parse_train(j, "train"); }
DecodeConfig decode_config_from_json(const json& j) { return parse_decode(j, "decode"); }
CalibrationConfig calibration_config_from_json(const json& j) { return parse_calibration(j, "ensemble"); }

ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig c;
  Fields f(j, "");
  f.get("name", c.name);
  f.get("out_dir", c.out_dir);
  f.nested("corpus", c.corpus, parse_corpus);
  f.nested("tokenizer", c.tokenizer, parse_tokenizer);
  f.nested("model", c.model, parse_model);
  f.nested("train", c.train, parse_train);
  f.nested("decode", c.decode, parse_decode);
  f.nested("ensemble", c.ensemble, parse_calibration);
  f.nested("ablate", c.ablate, parse_ablation);
  f.finish();
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  if (name.empty()) throw ConfigError("config.name must not be empty");
  corpus.validate();
  if (tokenizer.num_merges < 0) throw ConfigError("tokenizer.num_merges must be >= 0");
  ModelConfig m = model;
  if (m.vocab_size == 0) m.vocab_size = kNumSpecial + 1;  // filled from the tokenizer later
  m.validate();
  train.validate();
  decode.validate();
  ensemble.validate();
  if (ablate.seeds.empty()) throw ConfigError("ablate.seeds must not be empty");
  for (double t : ablate.tau_grid) {
    if (!(t >= 0 && t <= 100)) throw ConfigError("ablate.tau_grid values must lie in [0, 100]");
  }
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("config file not found: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

}  // namespace cxo
