#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"

#include "chexofa/ensemble.hpp"
#include "chexofa/errors.hpp"
#include "chexofa/metrics.hpp"
#include "chexofa/synthcxr.hpp"

using namespace cxo;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Brute force: full row means, then the set of maximizers.
std::vector<std::size_t> oracle_argmax(const Matrix& s) {
  const auto m = s.rows();
  std::vector<double> means;
  for (Eigen::Index i = 0; i < m; ++i) {
    double t = 0;
    for (Eigen::Index j = 0; j < m; ++j) t += i == j ? 0 : s(i, j);
    means.push_back(m == 1 ? 100 : t / static_cast<double>(m - 1));
  }
  const double best = *std::max_element(means.begin(), means.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < means.size(); ++i) {
    if (means[i] == best) out.push_back(i);
  }
  return out;
}

Matrix random_similarity(std::mt19937_64& rng, Eigen::Index m, bool coarse) {
  std::uniform_int_distribution<int> step(0, 4);
  std::uniform_real_distribution<double> u(0, 100);
  Matrix s(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) s(i, j) = i == j ? 100 : (coarse ? 25.0 * step(rng) : u(rng));
  return s;
}

const Finding kNormal{Kind::kNoFinding, Laterality::kNone, Severity::kNone};

// A plausible but possibly wrong variant of `labels`.
LabelSet perturb(const LabelSet& labels, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> coin(0, 2);
  if (coin(rng) == 0) return labels;
  LabelSet out;
  for (const auto& f : labels) {
    if (f.kind == Kind::kNoFinding || coin(rng) != 0) out.insert(f);
  }
  const bool has_cardio = std::any_of(out.begin(), out.end(), [](const Finding& f) { return f.kind == Kind::kCardiomegaly; });
  if (!has_cardio && coin(rng) == 0) {
    out.erase(kNormal);
    out.insert({Kind::kCardiomegaly, Laterality::kNone, Severity::kMild});
  }
  if (out.empty()) out.insert(kNormal);
  return out;
}

struct Fixture {
  std::vector<StudyRecord> records;
  std::vector<std::vector<Prediction>> members;
  std::vector<Prediction> cls;
};

Fixture synthetic_fixture(int n, std::uint64_t seed) {
  CorpusConfig cc;
  std::mt19937_64 rng(seed);
  Fixture fx;
  fx.members.resize(3);
  for (int i = 0; i < n; ++i) {
    fx.records.push_back(generate_record(cc, Split::kTest, i));
    const auto& r = fx.records.back();
    for (int m = 0; m < 3; ++m) {
      fx.members[static_cast<std::size_t>(m)].push_back(
          {r.id, "rsum", generate_impression_text(perturb(r.labels, rng), rng), -1.0 - m, std::nullopt});
    }
    const auto cls_labels = perturb(r.labels, rng);
    fx.cls.push_back({r.id, "cls_rsum", serialize_labels(cls_labels) + " <SEP> " + generate_impression_text(cls_labels, rng), -0.7,
                      cls_labels});
  }
  return fx;
}

}  // namespace

TEST_CASE("mutual similarity examples") {
  CHECK(mutual_similarity(std::vector<std::string>{"Left mild effusion."}) == Matrix::Constant(1, 1, 100));
  const std::vector<std::string> same = {"Severe left opacity.", "Severe left opacity."};
  CHECK(mutual_similarity(same) == Matrix::Constant(2, 2, 100));

  // Graphs: A = {(opacity,left)}, AB = {(opacity,left),(opacity,severe)}, C = {(nodule,right)}.
  const std::vector<std::string> texts = {"There is an opacity in the left lung.", "There is a severe opacity in the left lung.",
                                          "There is a nodule in the right lung."};
  REQUIRE(graph_extract(texts[0]).size() == 1);
  REQUIRE(graph_extract(texts[1]).size() == 2);
  const Matrix s = mutual_similarity(texts);
  Matrix expected(3, 3);
  expected << 100, 200.0 / 3, 0, 200.0 / 3, 100, 0, 0, 0, 100;
  CHECK((s - expected).cwiseAbs().maxCoeff() < 1e-12);

  CandidateSet dup{"x", {{"a", "t"}, {"a", "u"}}};
  CHECK_THROWS_AS(dup.validate(), ContractError);
}

TEST_CASE("select_best examples") {
  Matrix sym(2, 2);
  sym << 100, 80, 80, 100;
  std::set<std::size_t> seen;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto sel = select_best(sym, seed);
    CHECK(sel.tie);
    CHECK(sel.row_means == std::vector<double>{80, 80});
    CHECK(select_best(sym, seed).index == sel.index);
    seen.insert(sel.index);
  }
  CHECK(seen == std::set<std::size_t>{0, 1});

  Matrix strict(3, 3);
  strict << 100, 10, 20, 90, 100, 70, 30, 40, 100;
  const auto sel = select_best(strict, 0);
  CHECK(sel.index == 1);
  CHECK_FALSE(sel.tie);
  CHECK(sel.row_means[1] == doctest::Approx(80));

  const auto one = select_best(Matrix::Constant(1, 1, 100), 4);
  CHECK(one.index == 0);
  CHECK(one.row_means == std::vector<double>{100});
}

TEST_CASE("select_best agrees with brute force on 1000 random matrices") {
  std::mt19937_64 rng(2024);
  int ties = 0;
  for (int t = 0; t < 1000; ++t) {
    const Eigen::Index m = 1 + t % 6;
    const Matrix s = random_similarity(rng, m, t % 2 == 0);
    const auto expected = oracle_argmax(s);
    const auto sel = select_best(s, static_cast<std::uint64_t>(t));
    CHECK(std::find(expected.begin(), expected.end(), sel.index) != expected.end());
    CHECK(sel.tie == (expected.size() > 1));
    ties += sel.tie;
  }
  CHECK(ties > 0);
}

TEST_CASE("argmax is invariant under increasing affine maps of off-diagonal scores") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> a(0.1, 3.0), c(-50, 50);
  for (int t = 0; t < 300; ++t) {
    const Eigen::Index m = 2 + t % 5;
    const Matrix s = random_similarity(rng, m, false);
    Matrix u = s;
    const double scale = a(rng), shift = c(rng);
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < m; ++j)
        if (i != j) u(i, j) = scale * s(i, j) + shift;
    CHECK(oracle_argmax(u) == oracle_argmax(s));
    CHECK(select_best(u, 0).index == select_best(s, 0).index);
  }
}

TEST_CASE("factual calibration") {
  EnsembleResult r;
  r.final_text = "Small left pleural effusion.";
  r.confidence = 40;
  const LabelSet effusion_left = {{Kind::kEffusion, Laterality::kLeft, Severity::kSevere}};
  const LabelSet opacity = {{Kind::kOpacity, Laterality::kRight, Severity::kMild}};
  CalibrationConfig cfg;

  const auto same = factual_calibrate(r, effusion_left, "cls text", cfg);  // severity ignored
  CHECK_FALSE(same.calibrated);
  CHECK(same.final_text == r.final_text);

  const auto swapped = factual_calibrate(r, opacity, "Mild right opacity.", cfg);
  CHECK(swapped.calibrated);
  CHECK(swapped.final_text == "Mild right opacity.");

  r.confidence = 90;
  CHECK_FALSE(factual_calibrate(r, opacity, "Mild right opacity.", cfg).calibrated);
  r.confidence = 60;
  CHECK_FALSE(factual_calibrate(r, opacity, "Mild right opacity.", cfg).calibrated);
  r.confidence = 10;
  cfg.enabled = false;
  CHECK_FALSE(factual_calibrate(r, opacity, "Mild right opacity.", cfg).calibrated);
  cfg.tau = 101;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("calibration changes exactly the mismatched low-confidence studies") {
  const auto fx = synthetic_fixture(200, 3);
  CalibrationConfig on;
  on.tau = 70;
  CalibrationConfig off = on;
  off.enabled = false;
  const auto a = run_ensemble(fx.members, fx.cls, on);
  const auto b = run_ensemble(fx.members, fx.cls, off);
  int changed = 0;
  for (std::size_t i = 0; i < a.ids.size(); ++i) {
    const auto cls = std::find_if(fx.cls.begin(), fx.cls.end(), [&](const Prediction& p) { return p.id == a.ids[i]; });
    const auto [labels, text] = parse_cls_output(cls->prediction);
    const bool expect = !labels_match(rule_label(b.predictions[i].prediction), labels) && b.results[i].confidence < on.tau;
    CHECK(a.results[i].chosen == b.results[i].chosen);
    CHECK(a.results[i].calibrated == expect);
    CHECK((a.predictions[i].prediction != b.predictions[i].prediction) == (expect && text != b.predictions[i].prediction));
    if (expect) CHECK(a.predictions[i].prediction == text);
    changed += expect;
  }
  CHECK(changed > 0);
}

TEST_CASE("calibration with ground-truth labels never lowers findings F1") {
  for (std::uint64_t seed : {1, 2, 3, 4}) {
    auto fx = synthetic_fixture(150, seed);
    std::map<std::string, const StudyRecord*> rec;
    for (const auto& r : fx.records) rec[r.id] = &r;
    for (auto& c : fx.cls) {
      const auto& r = *rec.at(c.id);
      c.prediction = serialize_labels(r.labels) + " <SEP> " + r.impression;
      c.labels = r.labels;
    }
    for (double tau : {30.0, 60.0, 100.0}) {
      CalibrationConfig on;
      on.tau = tau;
      on.include_cls_candidate = false;
      CalibrationConfig off = on;
      off.enabled = false;
      auto f1 = [&](const EnsembleOutput& out) {
        std::vector<LabelSet> h, r;
        for (std::size_t i = 0; i < out.ids.size(); ++i) {
          h.push_back(rule_label(out.predictions[i].prediction));
          r.push_back(rec.at(out.ids[i])->labels);
        }
        return f1_findings(h, r);
      };
      CHECK(f1(run_ensemble(fx.members, fx.cls, on)) >= f1(run_ensemble(fx.members, fx.cls, off)));
    }
  }
}

TEST_CASE("run_ensemble contracts") {
  const auto fx = synthetic_fixture(30, 11);
  CalibrationConfig plain;
  plain.enabled = false;
  plain.include_cls_candidate = false;
  const std::vector<std::vector<Prediction>> one = {fx.members[0]};
  const auto single = run_ensemble(one, {}, plain);
  REQUIRE(single.predictions.size() == fx.members[0].size());
  for (std::size_t i = 0; i < single.predictions.size(); ++i) {
    CHECK(prediction_to_json(single.predictions[i]) == prediction_to_json(fx.members[0][i]));
  }

  // Reordering members permutes candidates but keeps tie-free outcomes.
  CalibrationConfig cfg;
  const auto a = run_ensemble(fx.members, fx.cls, cfg);
  const std::vector<std::vector<Prediction>> rev = {fx.members[2], fx.members[0], fx.members[1]};
  const auto b = run_ensemble(rev, fx.cls, cfg);
  for (std::size_t i = 0; i < a.ids.size(); ++i) {
    if (!a.results[i].tie) CHECK(a.predictions[i].prediction == b.predictions[i].prediction);
  }
  std::vector<Prediction> shuffled = fx.members[1];
  std::reverse(shuffled.begin(), shuffled.end());
  const std::vector<std::vector<Prediction>> order = {fx.members[0], shuffled, fx.members[2]};
  const auto c = run_ensemble(order, fx.cls, cfg);
  for (std::size_t i = 0; i < a.ids.size(); ++i) CHECK(c.predictions[i].prediction == a.predictions[i].prediction);

  auto missing = fx.members;
  missing[1].pop_back();
  try {
    run_ensemble(missing, fx.cls, cfg);
    FAIL("expected an error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find(fx.members[1].back().id) != std::string::npos);
  }
  auto cls_missing = fx.cls;
  cls_missing.erase(cls_missing.begin());
  CHECK_THROWS_AS(run_ensemble(fx.members, cls_missing, cfg), FormatError);
}

TEST_CASE("tau tuning picks a grid value") {
  const auto fx = synthetic_fixture(80, 5);
  std::map<std::string, std::string> refs;
  for (const auto& r : fx.records) refs[r.id] = r.impression;
  const std::vector<double> grid = {0, 25, 50, 75, 100};
  const double tau = tune_tau(fx.members, fx.cls, refs, CalibrationConfig{}, grid);
  CHECK(std::find(grid.begin(), grid.end(), tau) != grid.end());
  CHECK_THROWS_AS(tune_tau(fx.members, fx.cls, refs, CalibrationConfig{}, std::vector<double>{}), ContractError);
}

TEST_CASE("golden 20-study ensemble run") {
  const fs::path dir = "tests/data/ensemble_fixture";
  const bool update = std::getenv("CHEXOFA_UPDATE_GOLDENS") != nullptr;
  if (update) {
    fs::create_directories(dir);
    const auto fx = synthetic_fixture(20, 42);
    for (std::size_t m = 0; m < fx.members.size(); ++m) write_predictions(dir / ("member" + std::to_string(m) + ".jsonl"), fx.members[m]);
    write_predictions(dir / "cls.jsonl", fx.cls);
  }
  std::vector<std::vector<Prediction>> members;
  for (int m = 0; m < 3; ++m) members.push_back(read_predictions(dir / ("member" + std::to_string(m) + ".jsonl")));
  const auto cls = read_predictions(dir / "cls.jsonl");
  CalibrationConfig cfg;
  cfg.seed = 9;
  const auto out = run_ensemble(members, cls, cfg);
  const auto tmp = fs::temp_directory_path() / "chexofa_test_ensemble";
  fs::create_directories(tmp);
  write_predictions(tmp / "final.jsonl", out.predictions);
  write_ensemble_log(tmp / "log.csv", out);
  if (update) {
    fs::copy_file(tmp / "final.jsonl", dir / "expected_final.jsonl", fs::copy_options::overwrite_existing);
    fs::copy_file(tmp / "log.csv", dir / "expected_log.csv", fs::copy_options::overwrite_existing);
  }
  CHECK(slurp(tmp / "final.jsonl") == slurp(dir / "expected_final.jsonl"));
  CHECK(slurp(tmp / "log.csv") == slurp(dir / "expected_log.csv"));
  CHECK(slurp(dir / "expected_log.csv").rfind("id,row_means,chosen,tie,confidence,calibrated\n", 0) == 0);

  // Same inputs and seed: byte-identical output.
  const auto again = run_ensemble(members, cls, cfg);
  write_predictions(tmp / "again.jsonl", again.predictions);
  CHECK(slurp(tmp / "again.jsonl") == slurp(tmp / "final.jsonl"));
  fs::remove_all(tmp);
}
