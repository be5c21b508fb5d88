#include "chexofa/ensemble.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "chexofa/errors.hpp"
#include "chexofa/metrics.hpp"
#include "chexofa/synthcxr.hpp"

namespace cxo {

void CandidateSet::validate() const {
  if (candidates.empty()) throw ContractError("ensemble: study " + id + " has no candidates");
  std::set<std::string> tags;
  for (const auto& c : candidates) {
    if (!tags.insert(c.source).second) throw ContractError("ensemble: duplicate source " + c.source + " for " + id);
  }
}

Matrix mutual_similarity(std::span<const std::string> texts) {
  const auto m = static_cast<Eigen::Index>(texts.size());
  if (m == 0) throw ContractError("mutual_similarity: no candidates");
  std::vector<GraphSet> graphs;
  for (const auto& t : texts) graphs.push_back(graph_extract(t));
  Matrix s(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) s(i, j) = f1_graph_pair(graphs[static_cast<std::size_t>(i)], graphs[static_cast<std::size_t>(j)]);
  return s;
}

Matrix mutual_similarity(const CandidateSet& cands) {
  cands.validate();
  std::vector<std::string> texts;
  for (const auto& c : cands.candidates) texts.push_back(c.text);
  return mutual_similarity(texts);
}

Selection select_best(const Matrix& similarity, std::uint64_t seed) {
  const Eigen::Index m = similarity.rows();
  if (m == 0 || similarity.cols() != m) throw ShapeError("select_best: matrix must be square and non-empty");
  Selection out;
  if (m == 1) {
    out.row_means = {100.0};
    return out;
  }
  for (Eigen::Index i = 0; i < m; ++i) {
    double s = 0;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (j != i) s += similarity(i, j);
    }
    out.row_means.push_back(s / static_cast<double>(m - 1));
  }
  const double best = *std::max_element(out.row_means.begin(), out.row_means.end());
  std::vector<std::size_t> tied;
  for (std::size_t i = 0; i < out.row_means.size(); ++i) {
    if (out.row_means[i] == best) tied.push_back(i);
  }
  out.tie = tied.size() > 1;
  if (out.tie) {
    std::mt19937_64 rng(seed);
    out.index = tied[std::uniform_int_distribution<std::size_t>(0, tied.size() - 1)(rng)];
  } else {
    out.index = tied.front();
  }
  return out;
}

void CalibrationConfig::validate() const {
  if (!(tau >= 0 && tau <= 100)) throw ConfigError("ensemble.tau must lie in [0, 100]");
}

EnsembleResult ensemble_select(const CandidateSet& cands, std::uint64_t seed) {
  const auto sel = select_best(mutual_similarity(cands), seed);
  EnsembleResult r;
  r.chosen = sel.index;
  r.row_means = sel.row_means;
  r.confidence = sel.row_means[sel.index];
  r.tie = sel.tie;
  r.final_text = cands.candidates[sel.index].text;
  return r;
}

bool labels_match(const LabelSet& a, const LabelSet& b) { return kind_sides(a) == kind_sides(b); }

EnsembleResult factual_calibrate(EnsembleResult result, const LabelSet& cls_labels, const std::string& cls_text,
                                 const CalibrationConfig& config) {
  config.validate();
  result.calibrated = false;
  if (!config.enabled) return result;
  if (!labels_match(rule_label(result.final_text), cls_labels) && result.confidence < config.tau) {
    result.final_text = cls_text;
    result.calibrated = true;
  }
  return result;
}

namespace {

std::map<std::string, const Prediction*> index_by_id(const std::vector<Prediction>& preds, const std::string& what) {
  std::map<std::string, const Prediction*> out;
  for (const auto& p : preds) {
    if (!out.emplace(p.id, &p).second) throw FormatError("ensemble: duplicate id " + p.id + " in " + what);
  }
  return out;
}

void check_same_ids(const std::map<std::string, const Prediction*>& ref, const std::map<std::string, const Prediction*>& other,
                    const std::string& what) {
  std::vector<std::string> missing;
  for (const auto& [id, p] : ref) {
    if (!other.contains(id)) missing.push_back(id);
  }
  for (const auto& [id, p] : other) {
    if (!ref.contains(id)) missing.push_back(id);
  }
  if (missing.empty()) return;
  std::ostringstream msg;
  msg << "ensemble: " << what << " does not cover the same studies; mismatched ids:";
  for (std::size_t i = 0; i < missing.size() && i < 20; ++i) msg << ' ' << missing[i];
  if (missing.size() > 20) msg << " ... (" << missing.size() << " total)";
  throw FormatError(msg.str());
}

}  // namespace

EnsembleOutput run_ensemble(std::span<const std::vector<Prediction>> members, const std::vector<Prediction>& cls,
                            const CalibrationConfig& config) {
  config.validate();
  if (members.empty()) throw ContractError("ensemble: need at least one member prediction file");
  std::vector<std::map<std::string, const Prediction*>> by_id;
  for (std::size_t m = 0; m < members.size(); ++m) {
    by_id.push_back(index_by_id(members[m], "member " + std::to_string(m)));
    if (m > 0) check_same_ids(by_id[0], by_id[m], "member " + std::to_string(m));
  }
  const bool use_cls = config.enabled || config.include_cls_candidate;
  std::map<std::string, const Prediction*> cls_by_id;
  if (use_cls) {
    cls_by_id = index_by_id(cls, "cls predictions");
    check_same_ids(by_id[0], cls_by_id, "cls predictions");
  }

  EnsembleOutput out;
  for (const auto& [id, first] : by_id[0]) {
    CandidateSet cands{id, {}};
    std::vector<const Prediction*> origin;
    for (std::size_t m = 0; m < members.size(); ++m) {
      const Prediction* p = by_id[m].at(id);
      cands.candidates.push_back({"m" + std::to_string(m), p->prediction});
      origin.push_back(p);
    }
    LabelSet cls_labels;
    std::string cls_text;
    Prediction cls_pred;
    if (use_cls) {
      const Prediction* c = cls_by_id.at(id);
      std::tie(cls_labels, cls_text) = parse_cls_output(c->prediction);
      cls_pred = Prediction{id, c->task, cls_text, c->score, std::nullopt};
      if (config.include_cls_candidate) {
        cands.candidates.push_back({"cls", cls_text});
        origin.push_back(&cls_pred);
      }
    }
    auto result = ensemble_select(cands, record_seed(config.seed, id));
    Prediction final_pred = *origin[result.chosen];
    result = factual_calibrate(std::move(result), cls_labels, cls_text, config);
    if (result.calibrated) final_pred = cls_pred;
    out.ids.push_back(id);
    out.predictions.push_back(std::move(final_pred));
    out.results.push_back(std::move(result));
  }
  return out;
}

void write_ensemble_log(const std::filesystem::path& path, const EnsembleOutput& out) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.precision(17);
  f << "id,row_means,chosen,tie,confidence,calibrated\n";
  for (std::size_t i = 0; i < out.ids.size(); ++i) {
    const auto& r = out.results[i];
    f << out.ids[i] << ',';
    for (std::size_t k = 0; k < r.row_means.size(); ++k) f << (k ? ";" : "") << r.row_means[k];
    f << ',' << r.chosen << ',' << (r.tie ? 1 : 0) << ',' << r.confidence << ',' << (r.calibrated ? 1 : 0) << '\n';
  }
  if (!f) throw IoError("write failed: " + path.string());
}

double tune_tau(std::span<const std::vector<Prediction>> members, const std::vector<Prediction>& cls,
                const std::map<std::string, std::string>& references, CalibrationConfig config,
                std::span<const double> grid) {
  if (grid.empty()) throw ContractError("tune_tau: empty grid");
  config.enabled = true;
  double best_tau = grid.front();
  double best = -1;
  std::vector<double> sorted(grid.begin(), grid.end());
  std::sort(sorted.begin(), sorted.end());
  for (double tau : sorted) {
    config.tau = tau;
    const auto out = run_ensemble(members, cls, config);
    std::vector<LabelSet> hl, rl;
    std::vector<GraphSet> hg, rg;
    for (std::size_t i = 0; i < out.ids.size(); ++i) {
      const auto ref = references.find(out.ids[i]);
      if (ref == references.end()) throw FormatError("tune_tau: no reference for " + out.ids[i]);
      hl.push_back(rule_label(out.predictions[i].prediction));
      rl.push_back(rule_label(ref->second));
      hg.push_back(graph_from_labels(hl.back()));
      rg.push_back(graph_from_labels(rl.back()));
    }
    const double v = f1_findings(hl, rl) + f1_graph(hg, rg);
    if (v > best) {
      best = v;
      best_tau = tau;
    }
  }
  return best_tau;
}

}  // namespace cxo
