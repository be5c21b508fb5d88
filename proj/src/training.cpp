#include "chexofa/training.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "chexofa/config.hpp"
#include "chexofa/errors.hpp"

namespace cxo {
namespace fs = std::filesystem;

std::string_view to_string(TaskKind t) {
  switch (t) {
    case TaskKind::kRGen: return "rgen";
    case TaskKind::kRSum: return "rsum";
    case TaskKind::kClsRSum: return "cls_rsum";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view s) {
  for (auto t : {TaskKind::kRGen, TaskKind::kRSum, TaskKind::kClsRSum}) {
    if (to_string(t) == s) return t;
  }
  throw FormatError("unknown task '" + std::string(s) + "'");
}

std::string_view instruction_text(TaskKind t) {
  switch (t) {
    case TaskKind::kRGen: return kRGenInstruction;
    case TaskKind::kRSum: return kRSumInstruction;
    case TaskKind::kClsRSum: return kClsRSumInstruction;
  }
  return {};
}

std::vector<std::string> tokenizer_training_text(std::span<const StudyRecord> records) {
  std::vector<std::string> out;
  for (auto t : {TaskKind::kRGen, TaskKind::kRSum, TaskKind::kClsRSum}) out.emplace_back(instruction_text(t));
  for (const auto& r : records) {
    out.push_back(r.findings);
    out.push_back(r.impression);
    out.push_back(serialize_labels(r.labels));
  }
  return out;
}

std::vector<int> cls_target_body(const StudyRecord& record, const BpeTokenizer& tokenizer) {
  auto ids = tokenizer.encode(serialize_labels(record.labels));
  ids.push_back(kSepId);
  const auto imp = tokenizer.encode(record.impression);
  ids.insert(ids.end(), imp.begin(), imp.end());
  return ids;
}

TaskInstance make_instance(const StudyRecord& record, TaskKind task, const BpeTokenizer& tokenizer, int max_text_len,
                           bool text_only) {
  TaskInstance inst;
  inst.task = task;
  inst.input.instruction_ids = tokenizer.encode(instruction_text(task));
  std::vector<int> body;
  if (task == TaskKind::kRGen) {
    if (record.image.pixels.empty()) throw ContractError("make_instance: RGen needs an image for " + record.id);
    inst.input.image = record.image;
    body = tokenizer.encode(record.findings);
  } else {
    if (record.findings.empty()) throw ContractError("make_instance: " + std::string(to_string(task)) + " needs findings for " + record.id);
    inst.input.text_ids = tokenizer.encode(record.findings);
    if (!text_only) {
      if (record.image.pixels.empty()) throw ContractError("make_instance: missing image for " + record.id);
      inst.input.image = record.image;
    }
    body = task == TaskKind::kRSum ? tokenizer.encode(record.impression) : cls_target_body(record, tokenizer);
  }
  if (max_text_len < 2) throw ContractError("make_instance: max_text_len must be >= 2");
  body.resize(std::min(body.size(), static_cast<std::size_t>(max_text_len - 1)));
  inst.target_ids.reserve(body.size() + 2);
  inst.target_ids.push_back(kBosId);
  inst.target_ids.insert(inst.target_ids.end(), body.begin(), body.end());
  inst.target_ids.push_back(kEosId);
  return inst;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (pretrain_epochs < 1 || finetune_epochs < 1) throw ConfigError("train epochs must be >= 1");
  if (task_mix[0] < 0 || task_mix[1] < 0 || std::abs(task_mix[0] + task_mix[1] - 1.0) > 1e-9) {
    throw ConfigError("train.task_mix must be non-negative and sum to 1");
  }
  if (eval_every < 0) throw ConfigError("train.eval_every must be >= 0");
  if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be >= 0");
  if (patience < 1) throw ConfigError("train.patience must be >= 1");
  if (!(adam.lr > 0)) throw ConfigError("train.adam.lr must be positive");
}

Var batch_loss(ForwardPass& pass, std::span<const TaskInstance> batch) {
  if (batch.empty()) throw ContractError("batch_loss: empty batch");
  std::vector<EncoderInput> inputs;
  std::vector<std::vector<int>> dec_in;
  std::vector<std::size_t> mem_index;
  std::vector<int> targets;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& t = batch[i].target_ids;
    if (t.size() < 2 || t.front() != kBosId || t.back() != kEosId) {
      throw ContractError("batch_loss: target must run BOS ... EOS");
    }
    inputs.push_back(batch[i].input);
    dec_in.emplace_back(t.begin(), t.end() - 1);
    targets.insert(targets.end(), t.begin() + 1, t.end());
    mem_index.push_back(i);
  }
  const auto memory = pass.encode(pass.fuse(inputs));
  return cross_entropy(pass.logits(pass.decode_hidden(memory, dec_in, mem_index)), targets, kPadId);
}

double evaluation_loss(const ModelConfig& config, const ModelParams& params, std::span<const TaskInstance> instances,
                       int batch_size) {
  if (instances.empty()) throw ContractError("evaluation_loss: no instances");
  double total = 0;
  std::size_t tokens = 0;
  for (std::size_t b = 0; b < instances.size(); b += static_cast<std::size_t>(batch_size)) {
    const auto batch = instances.subspan(b, std::min(static_cast<std::size_t>(batch_size), instances.size() - b));
    std::size_t n = 0;
    for (const auto& inst : batch) n += inst.target_ids.size() - 1;
    Tape tape(GradMode::kDisabled);
    ForwardPass pass(config, params, tape, Mode::kEval);
    total += batch_loss(pass, batch).value()(0, 0) * static_cast<double>(n);
    tokens += n;
  }
  return total / static_cast<double>(tokens);
}

namespace {

// Independent streams per purpose so that changing one never shifts another.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
  std::array<std::uint32_t, 2> w{};
  seq.generate(w.begin(), w.end());
  return (static_cast<std::uint64_t>(w[0]) << 32) | w[1];
}

constexpr std::uint64_t kSaltShuffle = 1, kSaltTasks = 2, kSaltDropout = 3;
constexpr std::uint64_t kSaltPretrain = 0x100, kSaltFinetune = 0x200;

class CsvLog {
 public:
  explicit CsvLog(const fs::path& path) {
    if (path.empty()) return;
    out_.open(path);
    if (!out_) throw IoError("cannot write " + path.string());
    out_ << "step,task,loss\n";
    out_.precision(17);
  }
  void row(std::int64_t step, std::string_view task, double loss) {
    if (out_.is_open()) out_ << step << ',' << task << ',' << loss << '\n';
  }

 private:
  std::ofstream out_;
};

struct Phase {
  std::uint64_t salt;
  int epochs;
  TaskKind eval_task;
  std::vector<TaskKind> schedule;  // one task per batch
};

TrainResult run_phase(const ModelConfig& model_config, const ModelParams& init, const TrainData& data,
                      const TrainConfig& config, const fs::path& run_dir, Phase phase) {
  config.validate();
  model_config.validate();
  if (!data.tokenizer) throw ContractError("train: tokenizer missing");
  if (data.train.empty() || data.val.empty()) throw ContractError("train: empty train or validation split");

  if (!run_dir.empty()) {
    std::error_code ec;
    fs::create_directories(run_dir / "checkpoints", ec);
    if (ec) throw IoError("cannot create " + (run_dir / "checkpoints").string() + ": " + ec.message());
    std::ofstream(run_dir / "config.json") << train_config_to_json(config).dump(2) << '\n';
  }
  CsvLog log(run_dir.empty() ? fs::path() : run_dir / "metrics.csv");

  std::vector<TaskInstance> val;
  for (const auto& r : data.val) {
    val.push_back(make_instance(r, phase.eval_task, *data.tokenizer, model_config.max_text_len, config.text_only));
  }

  TrainResult result{init, init, 0, 0, 0, false, {}};
  ModelParams params = init;
  std::int64_t step = 0;
  auto val_loss = [&]() {
    try {
      return evaluation_loss(model_config, params, val, config.batch_size);
    } catch (const NumericError& e) {
      throw DivergenceError("validation diverged at step " + std::to_string(step) + ": " + e.what());
    }
  };
  result.initial_val_loss = val_loss();
  result.best_val_loss = result.initial_val_loss;
  log.row(0, "val_" + std::string(to_string(phase.eval_task)), result.initial_val_loss);

  AdamState adam;
  adam.config = config.adam;
  std::mt19937_64 shuffle_rng(stream_seed(config.seed, phase.salt + kSaltShuffle));
  std::vector<std::size_t> order(data.train.size());
  const auto bs = static_cast<std::size_t>(config.batch_size);
  const std::int64_t per_epoch = static_cast<std::int64_t>((order.size() + bs - 1) / bs);
  int since_best = 0;

  auto evaluate = [&]() {
    const double v = val_loss();
    log.row(step, "val_" + std::string(to_string(phase.eval_task)), v);
    if (data.progress) *data.progress << "  step " << step << " val " << to_string(phase.eval_task) << " loss " << v << '\n';
    if (v < result.best_val_loss) {
      result.best_val_loss = v;
      result.best = params;
      since_best = 0;
    } else {
      ++since_best;
    }
    return since_best >= config.patience;
  };

  bool stop = false;
  for (int epoch = 0; epoch < phase.epochs && !stop; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::int64_t b = 0; b < per_epoch && !stop; ++b) {
      const TaskKind task = phase.schedule[static_cast<std::size_t>(epoch * per_epoch + b)];
      std::vector<TaskInstance> batch;
      for (std::size_t i = static_cast<std::size_t>(b) * bs; i < std::min(order.size(), static_cast<std::size_t>(b + 1) * bs); ++i) {
        batch.push_back(make_instance(data.train[order[i]], task, *data.tokenizer, model_config.max_text_len, config.text_only));
        ++result.instances_built[task];
      }
      ++step;
      double loss = 0;
      try {
        Tape tape;
        ForwardPass pass(model_config, params, tape, Mode::kTrain, stream_seed(config.seed, phase.salt + kSaltDropout + (static_cast<std::uint64_t>(step) << 8)));
        const Var l = batch_loss(pass, batch);
        loss = l.value()(0, 0);
        const auto grads = tape.backward(l);
        std::vector<Tensor*> ps;
        std::vector<const Matrix*> gs;
        for (std::size_t i = 0; i < params.named().size(); ++i) {
          const Matrix& g = grads[pass.param_vars()[i]];
          if (!g.allFinite()) throw NumericError("non-finite gradient for " + params.named()[i].first);
          ps.push_back(&params.named()[i].second);
          gs.push_back(&g);
        }
        const double warm = config.warmup_steps > 0 ? std::min(1.0, static_cast<double>(step) / config.warmup_steps) : 1.0;
        adam_step(ps, gs, adam, warm);
      } catch (const NumericError& e) {
        throw DivergenceError("training diverged at step " + std::to_string(step) + " (" + std::string(to_string(task)) + "): " + e.what());
      }
      log.row(step, to_string(task), loss);
      const bool at_eval = config.eval_every > 0 ? step % config.eval_every == 0 : b + 1 == per_epoch;
      if (at_eval) stop = evaluate();
    }
    if (data.progress) *data.progress << "  epoch " << epoch + 1 << '/' << phase.epochs << " done\n";
  }
  result.stopped_early = stop;
  result.steps = step;
  result.last = params;
  if (!run_dir.empty()) {
    save_checkpoint(run_dir / "checkpoints" / "best.cxof", result.best.named());
    save_checkpoint(run_dir / "checkpoints" / "last.cxof", result.last.named());
  }
  return result;
}

std::int64_t batches_for(const TrainData& data, const TrainConfig& config, int epochs) {
  const auto bs = static_cast<std::int64_t>(config.batch_size);
  return epochs * ((static_cast<std::int64_t>(data.train.size()) + bs - 1) / bs);
}

}  // namespace

std::vector<TaskKind> finetune_schedule(const TrainConfig& config, std::int64_t batches) {
  std::mt19937_64 rng(stream_seed(config.seed, kSaltFinetune + kSaltTasks));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<TaskKind> out;
  out.reserve(static_cast<std::size_t>(batches));
  for (std::int64_t i = 0; i < batches; ++i) out.push_back(u(rng) < config.task_mix[0] ? TaskKind::kRSum : TaskKind::kClsRSum);
  return out;
}

TrainResult pretrain(const ModelConfig& model_config, const ModelParams& init, const TrainData& data,
                     const TrainConfig& config, const fs::path& run_dir) {
  if (config.skip_pretrain) {
    config.validate();
    if (!run_dir.empty()) {
      std::error_code ec;
      fs::create_directories(run_dir / "checkpoints", ec);
      if (ec) throw IoError("cannot create " + (run_dir / "checkpoints").string() + ": " + ec.message());
      std::ofstream(run_dir / "config.json") << train_config_to_json(config).dump(2) << '\n';
      CsvLog log(run_dir / "metrics.csv");
      save_checkpoint(run_dir / "checkpoints" / "best.cxof", init.named());
      save_checkpoint(run_dir / "checkpoints" / "last.cxof", init.named());
    }
    return TrainResult{init, init, 0, 0, 0, false, {}};
  }
  Phase phase{kSaltPretrain, config.pretrain_epochs, TaskKind::kRGen,
              std::vector<TaskKind>(static_cast<std::size_t>(batches_for(data, config, config.pretrain_epochs)), TaskKind::kRGen)};
  return run_phase(model_config, init, data, config, run_dir, std::move(phase));
}

TrainResult finetune(const ModelConfig& model_config, const ModelParams& init, const TrainData& data,
                     const TrainConfig& config, const fs::path& run_dir) {
  Phase phase{kSaltFinetune, config.finetune_epochs, TaskKind::kRSum,
              finetune_schedule(config, batches_for(data, config, config.finetune_epochs))};
  return run_phase(model_config, init, data, config, run_dir, std::move(phase));
}

}  // namespace cxo
