#include "chexofa/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "chexofa/checkpoint.hpp"
#include "chexofa/errors.hpp"

namespace cxo {
namespace fs = std::filesystem;

namespace {

constexpr Variant kVariants[] = {Variant::kFull, Variant::kScratch, Variant::kTextOnly};

std::string seed_dir(std::uint64_t seed) { return "seed" + std::to_string(seed); }

void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::string read_text(const fs::path& path, std::string_view producer) {
  require_artifact(path, producer);
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void note(const PipelineContext& ctx, const std::string& line) {
  if (ctx.log) *ctx.log << line << '\n' << std::flush;
}

std::vector<StudyRecord> load_records(const PipelineContext& ctx, Split split, bool with_images) {
  require_artifact(ctx.layout.corpus() / (std::string(to_string(split)) + ".jsonl"), "gen-data");
  return load_split(ctx.layout.corpus(), split, with_images);
}

BpeTokenizer load_tokenizer(const PipelineContext& ctx) {
  require_artifact(ctx.layout.tokenizer_file(), "train-bpe");
  return BpeTokenizer::load(ctx.layout.tokenizer_file());
}

// Config as actually run: vocabulary from the tokenizer, seed and variant
// switches applied.
ExperimentConfig resolve(const ExperimentConfig& base, const BpeTokenizer& tok, std::uint64_t seed,
                         std::optional<Variant> variant) {
  ExperimentConfig c = base;
  c.model.vocab_size = tok.vocab_size();
  c.train.seed = seed;
  c.decode.seed = seed;
  if (variant) {
    c.train.text_only = *variant == Variant::kTextOnly;
    c.train.skip_pretrain = *variant == Variant::kScratch;
  }
  return c;
}

Model load_model(const ModelConfig& mc, const fs::path& checkpoint, std::string_view producer) {
  require_artifact(checkpoint, producer);
  return Model(mc, ModelParams::from_named(mc, load_checkpoint(checkpoint)));
}

std::string finetune_producer(Variant v) { return "finetune --variant " + std::string(to_string(v)); }

// Token embeddings used for semsim_f1: the first full-variant seed, so every
// evaluation of one experiment shares a single embedding space.
Matrix reference_embeddings(const PipelineContext& ctx, const BpeTokenizer& tok) {
  const auto seed = ctx.config.ablate.seeds.front();
  const auto cfg = resolve(ctx.config, tok, seed, Variant::kFull);
  const auto path = ctx.layout.best_checkpoint(ctx.layout.finetune(Variant::kFull, seed));
  return load_model(cfg.model, path, finetune_producer(Variant::kFull)).params().get("tok_emb").matrix();
}

std::string impression_part(const Prediction& p) {
  return p.task == to_string(TaskKind::kClsRSum) ? parse_cls_output(p.prediction).second : p.prediction;
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", x);
  return buf;
}

MetricReport mean_report(const std::vector<MetricReport>& rs) {
  MetricReport m;
  for (const auto& r : rs) {
    m.bleu4 += r.bleu4;
    m.rouge_l += r.rouge_l;
    m.semsim_f1 += r.semsim_f1;
    m.f1_findings += r.f1_findings;
    m.f1_graph += r.f1_graph;
  }
  const double n = static_cast<double>(rs.size());
  m.bleu4 /= n;
  m.rouge_l /= n;
  m.semsim_f1 /= n;
  m.f1_findings /= n;
  m.f1_graph /= n;
  return m;
}

std::string metrics_csv_row(const MetricReport& r) {
  return fmt(r.bleu4) + "," + fmt(r.rouge_l) + "," + fmt(r.semsim_f1) + "," + fmt(r.f1_findings) + "," + fmt(r.f1_graph);
}

}  // namespace

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kScratch: return "scratch";
    case Variant::kTextOnly: return "text_only";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  for (auto v : kVariants) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown variant '" + std::string(s) + "' (expected full, scratch or text_only)");
}

fs::path Layout::pretrain(std::uint64_t seed) const { return root_ / "pretrain" / seed_dir(seed); }

fs::path Layout::finetune(Variant v, std::uint64_t seed) const {
  return root_ / "finetune" / std::string(to_string(v)) / seed_dir(seed);
}

fs::path Layout::decode_dir(Variant v, std::uint64_t seed) const {
  return root_ / "decode" / std::string(to_string(v)) / seed_dir(seed);
}

fs::path Layout::predictions(Variant v, std::uint64_t seed, Split split, TaskKind task) const {
  return decode_dir(v, seed) / (std::string(to_string(split)) + "_" + std::string(to_string(task)) + ".jsonl");
}

void require_artifact(const fs::path& path, std::string_view producer) {
  if (!fs::exists(path)) {
    throw MissingArtifactError("missing " + path.string() + " (run `" + std::string(producer) + "` first)");
  }
}

void write_resolved_config(const fs::path& dir, const ExperimentConfig& config) {
  write_text(dir / "experiment.json", experiment_config_to_json(config).dump(2) + "\n");
}

std::string file_checksum(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 14];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

void run_gen_data(const PipelineContext& ctx) {
  const auto dir = ctx.layout.corpus();
  note(ctx, "gen-data: " + dir.string());
  generate_corpus(ctx.config.corpus, dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != "checksums.txt" && e.path().filename() != "experiment.json") {
      files.push_back(fs::relative(e.path(), dir));
    }
  }
  std::sort(files.begin(), files.end());
  std::string sums;
  for (const auto& f : files) sums += file_checksum(dir / f) + "  " + f.generic_string() + "\n";
  write_text(dir / "checksums.txt", sums);
  write_resolved_config(dir, ctx.config);
}

void run_train_bpe(const PipelineContext& ctx) {
  const auto train = load_records(ctx, Split::kTrain, false);
  note(ctx, "train-bpe: " + std::to_string(ctx.config.tokenizer.num_merges) + " merges");
  const auto text = tokenizer_training_text(train);
  const auto tok = BpeTokenizer::train(text, ctx.config.tokenizer.num_merges);
  fs::create_directories(ctx.layout.tokenizer_dir());
  tok.save(ctx.layout.tokenizer_file());
  write_resolved_config(ctx.layout.tokenizer_dir(), resolve(ctx.config, tok, ctx.config.train.seed, std::nullopt));
}

void run_pretrain(const PipelineContext& ctx, std::uint64_t seed) {
  const auto tok = load_tokenizer(ctx);
  const auto cfg = resolve(ctx.config, tok, seed, std::nullopt);
  const auto train = load_records(ctx, Split::kTrain, true);
  const auto val = load_records(ctx, Split::kVal, true);
  const auto dir = ctx.layout.pretrain(seed);
  note(ctx, "pretrain: " + dir.string());
  TrainData data{train, val, &tok, ctx.log};
  pretrain(cfg.model, ModelParams::init(cfg.model, seed), data, cfg.train, dir);
  write_resolved_config(dir, cfg);
}

void run_finetune(const PipelineContext& ctx, Variant variant, std::uint64_t seed) {
  const auto tok = load_tokenizer(ctx);
  const auto cfg = resolve(ctx.config, tok, seed, variant);
  ModelParams init = ModelParams::init(cfg.model, seed);
  if (variant != Variant::kScratch) {
    const auto ckpt = ctx.layout.best_checkpoint(ctx.layout.pretrain(seed));
    require_artifact(ckpt, "pretrain --seed " + std::to_string(seed));
    init = ModelParams::from_named(cfg.model, load_checkpoint(ckpt));
  }
  const auto train = load_records(ctx, Split::kTrain, variant != Variant::kTextOnly);
  const auto val = load_records(ctx, Split::kVal, variant != Variant::kTextOnly);
  const auto dir = ctx.layout.finetune(variant, seed);
  note(ctx, "finetune: " + dir.string());
  TrainData data{train, val, &tok, ctx.log};
  finetune(cfg.model, init, data, cfg.train, dir);
  write_resolved_config(dir, cfg);
}

fs::path run_decode(const PipelineContext& ctx, Variant variant, std::uint64_t seed, Split split, TaskKind task) {
  if (task == TaskKind::kRGen) throw ConfigError("decode: task must be rsum or cls_rsum");
  const auto tok = load_tokenizer(ctx);
  const auto cfg = resolve(ctx.config, tok, seed, variant);
  const Model model =
      load_model(cfg.model, ctx.layout.best_checkpoint(ctx.layout.finetune(variant, seed)), finetune_producer(variant));
  const auto records = load_records(ctx, split, variant != Variant::kTextOnly);
  const auto out = ctx.layout.predictions(variant, seed, split, task);
  note(ctx, "decode: " + out.string());
  DecodeConfig dc = cfg.decode;
  dc.max_len = std::min(dc.max_len, cfg.model.max_text_len);
  std::vector<Prediction> preds;
  preds.reserve(records.size());
  for (const auto& r : records) {
    const auto inst = make_instance(r, task, tok, cfg.model.max_text_len, variant == Variant::kTextOnly);
    const auto res = beam_search(model, inst.input, dc);
    Prediction p{r.id, std::string(to_string(task)), render_output(tok, res.tokens), res.score, std::nullopt};
    if (task == TaskKind::kClsRSum) p.labels = parse_cls_output(p.prediction).first;
    preds.push_back(std::move(p));
  }
  fs::create_directories(out.parent_path());
  write_predictions(out, preds);
  write_resolved_config(out.parent_path(), cfg);
  return out;
}

MetricReport run_evaluate(const PipelineContext& ctx, const fs::path& predictions, Split split, const std::string& name) {
  require_artifact(predictions, "decode");
  const auto preds = read_predictions(predictions);
  const auto records = load_records(ctx, split, false);
  std::map<std::string, const StudyRecord*> by_id;
  for (const auto& r : records) by_id[r.id] = &r;
  std::vector<std::string> ids, hyps, refs;
  for (const auto& p : preds) {
    auto it = by_id.find(p.id);
    if (it == by_id.end()) throw FormatError(predictions.string() + ": unknown study id " + p.id);
    ids.push_back(p.id);
    hyps.push_back(impression_part(p));
    refs.push_back(it->second->impression);
  }
  if (ids.size() != records.size()) {
    throw FormatError(predictions.string() + ": covers " + std::to_string(ids.size()) + " of " +
                      std::to_string(records.size()) + " studies");
  }
  const auto tok = load_tokenizer(ctx);
  const Matrix emb = reference_embeddings(ctx, tok);
  std::vector<StudyScore> per_study;
  const auto rep = evaluate_corpus(ids, hyps, refs, &tok, emb, &per_study);
  const auto dir = ctx.layout.evaluate_dir(name);
  write_text(dir / "metrics.json", to_json(rep) + "\n");
  std::ostringstream csv;
  csv << "id,rouge_l,semsim_f1,f1_graph,labels_match\n" << std::setprecision(17);
  for (const auto& s : per_study) {
    csv << s.id << ',' << s.rouge_l << ',' << s.semsim_f1 << ',' << s.f1_graph << ',' << (s.labels_match ? 1 : 0) << '\n';
  }
  write_text(dir / "per_study.csv", csv.str());
  write_text(dir / "source.txt", predictions.string() + "\n" + std::string(to_string(split)) + "\n");
  write_resolved_config(dir, resolve(ctx.config, tok, ctx.config.train.seed, std::nullopt));
  return rep;
}

EnsembleSummary run_ensemble_stage(const PipelineContext& ctx) {
  const auto& seeds = ctx.config.ablate.seeds;
  auto members_for = [&](Split split) {
    std::vector<std::vector<Prediction>> members;
    for (auto s : seeds) {
      const auto p = ctx.layout.predictions(Variant::kFull, s, split, TaskKind::kRSum);
      require_artifact(p, "decode --variant full --seed " + std::to_string(s) + " --split " + std::string(to_string(split)));
      members.push_back(read_predictions(p));
    }
    return members;
  };
  auto cls_for = [&](Split split) {
    const auto p = ctx.layout.predictions(Variant::kFull, seeds.front(), split, TaskKind::kClsRSum);
    require_artifact(p, "decode --task cls_rsum --split " + std::string(to_string(split)));
    return read_predictions(p);
  };

  CalibrationConfig cal = ctx.config.ensemble;
  if (!ctx.config.ablate.tau_grid.empty()) {
    std::map<std::string, std::string> refs;
    for (const auto& r : load_records(ctx, Split::kVal, false)) refs[r.id] = r.impression;
    cal.tau = tune_tau(members_for(Split::kVal), cls_for(Split::kVal), refs, cal, ctx.config.ablate.tau_grid);
  }
  const auto members = members_for(Split::kTest);
  const auto cls = cls_for(Split::kTest);
  const auto dir = ctx.layout.ensemble_dir();
  fs::create_directories(dir);
  note(ctx, "ensemble: tau " + fmt(cal.tau));

  CalibrationConfig off = cal;
  off.enabled = false;
  const auto on_out = run_ensemble(members, cls, cal);
  const auto off_out = run_ensemble(members, cls, off);
  write_predictions(dir / "final.jsonl", on_out.predictions);
  write_ensemble_log(dir / "ensemble_log.csv", on_out);
  write_predictions(dir / "uncalibrated.jsonl", off_out.predictions);
  write_ensemble_log(dir / "uncalibrated_log.csv", off_out);
  ExperimentConfig resolved = resolve(ctx.config, load_tokenizer(ctx), ctx.config.train.seed, std::nullopt);
  resolved.ensemble = cal;
  write_resolved_config(dir, resolved);
  write_text(dir / "tau.json", Json{{"tau", cal.tau}}.dump() + "\n");

  EnsembleSummary s;
  s.tau = cal.tau;
  s.calibrated = run_evaluate(ctx, dir / "final.jsonl", Split::kTest, "ensemble");
  s.uncalibrated = run_evaluate(ctx, dir / "uncalibrated.jsonl", Split::kTest, "ensemble_uncalibrated");
  for (const auto& r : on_out.results) s.calibrated_studies += r.calibrated;
  return s;
}

std::string ablation_csv(const AblationReport& r) {
  std::string out = "row,rouge_l,f1_findings,f1_graph\n";
  for (const auto& row : r.rows) out += row.name + "," + fmt(row.rouge_l) + "," + fmt(row.f1_findings) + "," + fmt(row.f1_graph) + "\n";
  return out;
}

std::string ablation_table(const AblationReport& r) {
  std::ostringstream out;
  out << std::left << std::setw(24) << "Method" << std::right << std::setw(10) << "ROUGE-L" << std::setw(14)
      << "F1-findings" << std::setw(12) << "F1-graph" << '\n';
  out << std::string(60, '-') << '\n';
  for (const auto& row : r.rows) {
    out << std::left << std::setw(24) << row.name << std::right << std::setw(10) << fmt(row.rouge_l) << std::setw(14)
        << fmt(row.f1_findings) << std::setw(12) << fmt(row.f1_graph) << '\n';
  }
  out << "\ntau = " << fmt(r.tau) << '\n';
  return out.str();
}

AblationReport run_ablate(const PipelineContext& ctx) {
  const auto& seeds = ctx.config.ablate.seeds;
  write_resolved_config(ctx.layout.root(), ctx.config);
  run_gen_data(ctx);
  run_train_bpe(ctx);

  AblationReport report;
  std::map<Variant, std::vector<MetricReport>> singles;
  for (auto seed : seeds) {
    run_pretrain(ctx, seed);
    for (auto v : kVariants) {
      run_finetune(ctx, v, seed);
      const auto test = run_decode(ctx, v, seed, Split::kTest, TaskKind::kRSum);
      const std::string name = std::string(to_string(v)) + "/" + seed_dir(seed);
      const auto rep = run_evaluate(ctx, test, Split::kTest, name);
      report.per_run[name] = rep;
      singles[v].push_back(rep);
      if (v == Variant::kFull && !ctx.config.ablate.tau_grid.empty()) {
        run_decode(ctx, v, seed, Split::kVal, TaskKind::kRSum);
      }
    }
  }
  const auto cls_seed = seeds.front();
  run_decode(ctx, Variant::kFull, cls_seed, Split::kTest, TaskKind::kClsRSum);
  if (!ctx.config.ablate.tau_grid.empty()) run_decode(ctx, Variant::kFull, cls_seed, Split::kVal, TaskKind::kClsRSum);

  const auto ens = run_ensemble_stage(ctx);
  report.per_run["ensemble"] = ens.calibrated;
  report.per_run["ensemble_uncalibrated"] = ens.uncalibrated;
  report.tau = ens.tau;
  auto row = [](std::string name, const MetricReport& m) { return AblationRow{std::move(name), m.rouge_l, m.f1_findings, m.f1_graph}; };
  report.rows = {row("Ensemble", ens.calibrated), row("Ensemble-Calibration", ens.uncalibrated),
                 row("Single", mean_report(singles[Variant::kFull])), row("Text-only", mean_report(singles[Variant::kTextOnly])),
                 row("-Pretraining", mean_report(singles[Variant::kScratch]))};

  const auto dir = ctx.layout.ablate_dir();
  write_text(dir / "report.csv", ablation_csv(report));
  write_text(dir / "report.txt", ablation_table(report));
  std::string runs = "run,bleu4,rouge_l,semsim_f1,f1_findings,f1_graph\n";
  for (const auto& [name, m] : report.per_run) runs += name + "," + metrics_csv_row(m) + "\n";
  write_text(dir / "runs.csv", runs);
  write_resolved_config(dir, ctx.config);
  return report;
}

std::string render_report(const Layout& layout) {
  const auto eval_root = layout.root() / "evaluate";
  if (!fs::exists(eval_root) && !fs::exists(layout.ablate_dir() / "report.txt")) {
    throw MissingArtifactError("missing " + eval_root.string() + " (run `evaluate` or `ablate` first)");
  }
  std::vector<std::pair<std::string, MetricReport>> rows;
  if (fs::exists(eval_root)) {
    for (const auto& e : fs::recursive_directory_iterator(eval_root)) {
      if (e.path().filename() == "metrics.json") {
        rows.emplace_back(fs::relative(e.path().parent_path(), eval_root).generic_string(),
                          metric_report_from_json(read_text(e.path(), "evaluate")));
      }
    }
  }
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::ostringstream out;
  if (!rows.empty()) {
    out << std::left << std::setw(28) << "Run" << std::right;
    for (const char* h : {"BLEU-4", "ROUGE-L", "SemSim", "F1-find", "F1-graph"}) out << std::setw(10) << h;
    out << '\n' << std::string(78, '-') << '\n';
    for (const auto& [name, m] : rows) {
      out << std::left << std::setw(28) << name << std::right;
      for (double v : {m.bleu4, m.rouge_l, m.semsim_f1, m.f1_findings, m.f1_graph}) out << std::setw(10) << fmt(v);
      out << '\n';
    }
  }
  const auto table = layout.ablate_dir() / "report.txt";
  if (fs::exists(table)) out << (rows.empty() ? "" : "\n") << read_text(table, "ablate");
  return out.str();
}

}  // namespace cxo
