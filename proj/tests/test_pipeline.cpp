#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"

#include "chexofa/errors.hpp"
#include "chexofa/pipeline.hpp"

using namespace cxo;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("chexofa_test_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

PipelineContext smoke(const fs::path& root) {
  auto cfg = load_experiment_config("configs/smoke.json");
  cfg.out_dir = root.string();
  return PipelineContext{cfg, Layout(root), nullptr};
}

int cli(const std::string& args, const fs::path& err) {
  const std::string cmd = std::string(CHEXOFA_CLI) + " " + args + " >/dev/null 2>" + err.string();
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("gen-data twice gives identical checksums") {
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  auto ctx = smoke(a);
  run_gen_data(ctx);
  run_gen_data(smoke(b));
  const auto sums = slurp(a / "corpus" / "checksums.txt");
  CHECK(sums == slurp(b / "corpus" / "checksums.txt"));
  CHECK(sums.find("train.jsonl") != std::string::npos);
  CHECK(fs::exists(a / "corpus" / "experiment.json"));

  // A different corpus seed changes the data.
  ctx.config.corpus.seed = 1;
  ctx.layout = Layout(scratch("gen_c"));
  run_gen_data(ctx);
  CHECK(slurp(ctx.layout.corpus() / "checksums.txt") != sums);
  for (const auto& p : {a, b, ctx.layout.root()}) fs::remove_all(p);
}

TEST_CASE("missing upstream artifacts name the file and the producing subcommand") {
  const auto root = scratch("missing");
  const auto ctx = smoke(root);
  auto expect = [](auto&& f, const std::string& file, const std::string& producer) {
    try {
      f();
      FAIL("expected MissingArtifactError");
    } catch (const MissingArtifactError& e) {
      const std::string msg = e.what();
      CHECK(msg.find(file) != std::string::npos);
      CHECK(msg.find(producer) != std::string::npos);
    }
  };
  expect([&] { run_train_bpe(ctx); }, "train.jsonl", "gen-data");
  run_gen_data(ctx);
  expect([&] { run_pretrain(ctx, 0); }, "tokenizer.json", "train-bpe");
  run_train_bpe(ctx);
  expect([&] { run_finetune(ctx, Variant::kFull, 0); }, "best.cxof", "pretrain");
  expect([&] { run_decode(ctx, Variant::kScratch, 0, Split::kTest, TaskKind::kRSum); }, "best.cxof", "finetune");
  expect([&] { run_ensemble_stage(ctx); }, "_rsum.jsonl", "decode");
  expect([&] { render_report(ctx.layout); }, "evaluate", "ablate");
  fs::remove_all(root);
}

TEST_CASE("smoke ablate emits five bounded rows and an identity evaluation scores 100") {
  const auto root = scratch("ablate");
  const auto ctx = smoke(root);
  const auto report = run_ablate(ctx);
  REQUIRE(report.rows.size() == 5);
  const std::vector<std::string> names = {"Ensemble", "Ensemble-Calibration", "Single", "Text-only", "-Pretraining"};
  for (std::size_t i = 0; i < names.size(); ++i) {
    CHECK(report.rows[i].name == names[i]);
    for (double v : {report.rows[i].rouge_l, report.rows[i].f1_findings, report.rows[i].f1_graph}) {
      CHECK(v >= 0);
      CHECK(v <= 100);
    }
  }
  const auto csv = slurp(root / "ablate" / "report.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
  CHECK(slurp(root / "ablate" / "report.txt") == ablation_table(report));
  for (const auto& dir : {root / "pretrain" / "seed1", root / "finetune" / "text_only" / "seed2", root / "ensemble",
                          root / "evaluate" / "scratch" / "seed0", root / "decode" / "full" / "seed0"}) {
    CAPTURE(dir);
    const auto resolved = load_experiment_config(dir / "experiment.json");
    CHECK(resolved.model.vocab_size > 0);
  }
  CHECK(load_experiment_config(root / "finetune" / "scratch" / "seed1" / "experiment.json").train.seed == 1);
  CHECK(load_experiment_config(root / "finetune" / "text_only" / "seed0" / "experiment.json").train.text_only);

  std::vector<Prediction> perfect;
  for (const auto& r : load_split(ctx.layout.corpus(), Split::kTest, false)) perfect.push_back({r.id, "rsum", r.impression, 0.0, std::nullopt});
  write_predictions(root / "perfect.jsonl", perfect);
  const auto m = run_evaluate(ctx, root / "perfect.jsonl", Split::kTest, "identity");
  CHECK(m.bleu4 == doctest::Approx(100));
  CHECK(m.rouge_l == doctest::Approx(100));
  CHECK(m.semsim_f1 == doctest::Approx(100));
  CHECK(m.f1_findings == doctest::Approx(100));
  CHECK(m.f1_graph == doctest::Approx(100));
  const auto text = render_report(ctx.layout);
  CHECK(text.find("identity") != std::string::npos);
  CHECK(text.find("Ensemble-Calibration") != std::string::npos);
  fs::remove_all(root);
}

TEST_CASE("cli exit codes and one-line errors") {
  const auto root = scratch("cli");
  fs::create_directories(root);
  const auto err = root / "err.txt";
  CHECK(cli("gen-data --config configs/smoke.json --out " + (root / "run").string(), err) == 0);
  CHECK(fs::exists(root / "run" / "corpus" / "test.jsonl"));

  CHECK(cli("pretrain --config configs/smoke.json --out " + (root / "run").string(), err) == 1);
  const auto msg = slurp(err);
  CHECK(msg.rfind("MissingArtifactError: ", 0) == 0);
  CHECK(msg.find("train-bpe") != std::string::npos);
  CHECK(std::count(msg.begin(), msg.end(), '\n') == 1);

  std::ofstream(root / "bad.json") << R"({"name": "b", "trian": {}})";
  CHECK(cli("train-bpe --config " + (root / "bad.json").string(), err) == 1);
  CHECK(slurp(err).rfind("ConfigError: ", 0) == 0);

  CHECK(cli("decode --config configs/smoke.json --variant nope", err) != 0);
  CHECK(cli("frobnicate", err) != 0);
  fs::remove_all(root);
}
