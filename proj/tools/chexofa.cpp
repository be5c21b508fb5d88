// Command-line driver. Each subcommand reads an experiment config, runs one
// stage, and writes under the experiment's output directory.

#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "chexofa/errors.hpp"
#include "chexofa/pipeline.hpp"

namespace {

using namespace cxo;

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string variant = "full";
  std::string split = "test";
  std::string task = "rsum";
  std::string predictions;
  std::string name;
};

PipelineContext context(const Options& o) {
  ExperimentConfig cfg = load_experiment_config(o.config);
  if (!o.out.empty()) cfg.out_dir = o.out;
  return PipelineContext{cfg, Layout(cfg.out_dir), &std::cerr};
}

std::uint64_t run_seed(const Options& o, const ExperimentConfig& cfg) { return o.seed.value_or(cfg.ablate.seeds.front()); }

int dispatch(const std::string& cmd, const Options& o) {
  PipelineContext ctx = context(o);
  auto& cfg = ctx.config;
  if (cmd == "gen-data") {
    if (o.seed) cfg.corpus.seed = *o.seed;
    run_gen_data(ctx);
  } else if (cmd == "train-bpe") {
    run_train_bpe(ctx);
  } else if (cmd == "pretrain") {
    run_pretrain(ctx, run_seed(o, cfg));
  } else if (cmd == "finetune") {
    run_finetune(ctx, parse_variant(o.variant), run_seed(o, cfg));
  } else if (cmd == "decode") {
    std::cout << run_decode(ctx, parse_variant(o.variant), run_seed(o, cfg), parse_split(o.split), parse_task_kind(o.task)).string()
              << '\n';
  } else if (cmd == "evaluate") {
    const auto split = parse_split(o.split);
    const auto variant = parse_variant(o.variant);
    const auto seed = run_seed(o, cfg);
    const std::filesystem::path preds =
        o.predictions.empty() ? ctx.layout.predictions(variant, seed, split, parse_task_kind(o.task)) : std::filesystem::path(o.predictions);
    const std::string name = o.name.empty() ? std::string(to_string(variant)) + "/seed" + std::to_string(seed) : o.name;
    std::cout << to_json(run_evaluate(ctx, preds, split, name)) << '\n';
  } else if (cmd == "ensemble") {
    if (o.seed) cfg.ensemble.seed = *o.seed;
    const auto s = run_ensemble_stage(ctx);
    std::cout << "tau " << s.tau << ", calibrated studies " << s.calibrated_studies << '\n'
              << "calibrated   " << to_json(s.calibrated) << '\n'
              << "uncalibrated " << to_json(s.uncalibrated) << '\n';
  } else if (cmd == "ablate") {
    if (o.seed) cfg.ensemble.seed = *o.seed;
    std::cout << ablation_table(run_ablate(ctx));
  } else if (cmd == "report") {
    std::cout << render_report(ctx.layout);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chexofa: instruction-driven report generation and summarization on SynthCXR"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "output directory; overrides out_dir");
    sub->add_option("--seed", o.seed, "corpus seed for gen-data, tie-break seed for ensemble/ablate, model seed otherwise");
    return sub;
  };
  auto variant = [&](CLI::App* sub) {
    sub->add_option("--variant", o.variant, "full, scratch or text_only")->check(CLI::IsMember({"full", "scratch", "text_only"}));
  };
  auto split = [&](CLI::App* sub) { sub->add_option("--split", o.split, "val or test")->check(CLI::IsMember({"val", "test"})); };
  auto task = [&](CLI::App* sub) { sub->add_option("--task", o.task, "rsum or cls_rsum")->check(CLI::IsMember({"rsum", "cls_rsum"})); };

  common(app.add_subcommand("gen-data", "generate the SynthCXR corpus"));
  common(app.add_subcommand("train-bpe", "train the BPE tokenizer on the training split"));
  common(app.add_subcommand("pretrain", "RGen pre-training"));
  auto* ft = common(app.add_subcommand("finetune", "RSum / ClsRSum fine-tuning"));
  variant(ft);
  auto* dec = common(app.add_subcommand("decode", "beam-search decoding of one split"));
  variant(dec);
  split(dec);
  task(dec);
  auto* ev = common(app.add_subcommand("evaluate", "score a prediction file"));
  variant(ev);
  split(ev);
  task(ev);
  ev->add_option("--predictions", o.predictions, "prediction JSONL; defaults to the matching decode output");
  ev->add_option("--name", o.name, "result name under evaluate/");
  common(app.add_subcommand("ensemble", "mutual-similarity ensemble with factual calibration"));
  common(app.add_subcommand("ablate", "run every stage and the five-row ablation"));
  common(app.add_subcommand("report", "render metric comparisons"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    return dispatch(cmd, o);
  } catch (const Error& e) {
    std::cerr << e.kind() << ": " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "InternalError: " << e.what() << '\n';
  }
  return 1;
}
