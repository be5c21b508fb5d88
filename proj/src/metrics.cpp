#include "chexofa/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <sstream>

#include "json.hpp"

#include "chexofa/errors.hpp"

namespace cxo {
namespace {

using Words = std::vector<std::string>;

struct SurfaceForm {
  Kind kind;
  Words words;
};

const std::vector<SurfaceForm>& lexicon() {
  static const std::vector<SurfaceForm> forms = {
      {Kind::kOpacity, {"opacity"}},
      {Kind::kOpacity, {"consolidation"}},
      {Kind::kEffusion, {"effusion"}},
      {Kind::kEffusion, {"pleural", "fluid"}},
      {Kind::kCardiomegaly, {"cardiomegaly"}},
      {Kind::kCardiomegaly, {"enlargement", "of", "the", "cardiac", "silhouette"}},
      {Kind::kNodule, {"nodule"}},
      {Kind::kNodule, {"nodular", "density"}},
      {Kind::kPneumothorax, {"pneumothorax"}},
      {Kind::kDevice, {"catheter"}},
      {Kind::kDevice, {"support", "device"}},
      {Kind::kDevice, {"chest", "tube"}},
      {Kind::kFracture, {"fracture"}},
  };
  return forms;
}

const std::vector<Words> kNormalPhrases = {{"no", "acute", "cardiopulmonary", "process"},
                                           {"no", "acute", "cardiopulmonary", "abnormality"}};
const std::vector<Words> kNegationCues = {{"no"}, {"without"}, {"resolved"}, {"absence", "of"}, {"negative", "for"}, {"free", "of"}};

std::vector<Words> sentences(std::string_view text) {
  std::vector<Words> out(1);
  std::string cur;
  auto flush_word = [&] {
    if (!cur.empty()) out.back().push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (ch == '.' || ch == '!' || ch == '?' || ch == ';') {
      flush_word();
      if (!out.back().empty()) out.emplace_back();
    } else if (std::isspace(c) || ch == ',' || ch == ':') {
      flush_word();
    } else {
      cur += static_cast<char>(std::tolower(c));
    }
  }
  flush_word();
  if (out.back().empty()) out.pop_back();
  return out;
}

bool matches_at(const Words& s, std::size_t i, const Words& phrase) {
  if (i + phrase.size() > s.size()) return false;
  for (std::size_t k = 0; k < phrase.size(); ++k) {
    if (s[i + k] != phrase[k]) return false;
  }
  return true;
}

bool negated_before(const Words& s, std::size_t pos) {
  for (std::size_t i = 0; i < pos; ++i) {
    for (const auto& cue : kNegationCues) {
      if (i + cue.size() <= pos && matches_at(s, i, cue)) return true;
    }
  }
  return false;
}

template <typename Enum>
Enum nearest_modifier(const Words& s, std::size_t pos, std::size_t len, std::initializer_list<Enum> values) {
  Enum best{};
  std::size_t best_dist = s.size() + 1;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i >= pos && i < pos + len) continue;
    for (auto v : values) {
      if (s[i] == to_string(v)) {
        const std::size_t dist = i < pos ? pos - i : i - (pos + len - 1);
        if (dist < best_dist) {
          best_dist = dist;
          best = v;
        }
      }
    }
  }
  return best;
}

std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

double harmonic(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

void check_corpus(std::size_t nh, std::size_t nr, const char* what) {
  if (nh != nr) throw ContractError(std::string(what) + ": " + std::to_string(nh) + " hypotheses vs " + std::to_string(nr) + " references");
  if (nh == 0) throw ContractError(std::string(what) + ": empty corpus");
}

}  // namespace

LabelSet rule_label(std::string_view text) {
  std::map<Kind, Finding> asserted;
  bool normal = false;
  for (const auto& s : sentences(text)) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      for (const auto& phrase : kNormalPhrases) {
        if (matches_at(s, i, phrase)) normal = true;
      }
      for (const auto& form : lexicon()) {
        if (!matches_at(s, i, form.words) || asserted.contains(form.kind)) continue;
        if (negated_before(s, i)) continue;
        Finding f{form.kind, Laterality::kNone, Severity::kNone};
        f.laterality = nearest_modifier(s, i, form.words.size(), {Laterality::kLeft, Laterality::kRight, Laterality::kBilateral});
        f.severity = nearest_modifier(s, i, form.words.size(), {Severity::kMild, Severity::kModerate, Severity::kSevere});
        asserted.emplace(form.kind, f);
      }
    }
  }
  LabelSet out;
  for (const auto& [k, f] : asserted) out.insert(f);
  if (out.empty() && normal) out.insert({Kind::kNoFinding, Laterality::kNone, Severity::kNone});
  return out;
}

GraphSet graph_from_labels(const LabelSet& labels) {
  GraphSet g;
  for (const auto& f : labels) {
    if (f.kind == Kind::kNoFinding) continue;
    if (f.laterality != Laterality::kNone) g.emplace(f.kind, std::string(to_string(f.laterality)));
    if (f.severity != Severity::kNone) g.emplace(f.kind, std::string(to_string(f.severity)));
  }
  return g;
}

GraphSet graph_extract(std::string_view text) { return graph_from_labels(rule_label(text)); }

std::vector<std::string> metric_tokens(std::string_view text) { return split_tokens(text); }

double bleu4(std::span<const std::string> hypotheses, std::span<const std::string> references) {
  check_corpus(hypotheses.size(), references.size(), "bleu4");
  std::array<double, 4> matched{}, total{};
  double hyp_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto h = split_tokens(hypotheses[s]);
    const auto r = split_tokens(references[s]);
    hyp_len += static_cast<double>(h.size());
    ref_len += static_cast<double>(r.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<std::vector<std::string>, int> ref_counts;
      for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[{r.begin() + i, r.begin() + i + n}];
      std::map<std::vector<std::string>, int> hyp_counts;
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[{h.begin() + i, h.begin() + i + n}];
      for (const auto& [g, c] : hyp_counts) {
        auto it = ref_counts.find(g);
        matched[n - 1] += std::min(c, it == ref_counts.end() ? 0 : it->second);
        total[n - 1] += c;
      }
    }
  }
  if (hyp_len == 0 || matched[0] == 0) return 0.0;
  double log_p = std::log(matched[0] / total[0]);
  for (std::size_t n = 1; n < 4; ++n) log_p += std::log((matched[n] + 1.0) / (total[n] + 1.0));
  const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return 100.0 * bp * std::exp(log_p / 4.0);
}

double rouge_l_pair(std::string_view hypothesis, std::string_view reference, double beta) {
  const auto h = split_tokens(hypothesis);
  const auto r = split_tokens(reference);
  if (h.empty() || r.empty()) return 0.0;
  std::vector<int> prev(r.size() + 1, 0), cur(r.size() + 1, 0);
  for (std::size_t i = 1; i <= h.size(); ++i) {
    for (std::size_t j = 1; j <= r.size(); ++j) {
      cur[j] = h[i - 1] == r[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = prev[r.size()];
  if (lcs == 0) return 0.0;
  const double p = lcs / static_cast<double>(h.size());
  const double rc = lcs / static_cast<double>(r.size());
  const double b2 = beta * beta;
  return (1 + b2) * p * rc / (rc + b2 * p);
}

double rouge_l(std::span<const std::string> hypotheses, std::span<const std::string> references) {
  check_corpus(hypotheses.size(), references.size(), "rouge_l");
  double s = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) s += rouge_l_pair(hypotheses[i], references[i]);
  return 100.0 * s / static_cast<double>(hypotheses.size());
}

double semsim_f1(std::span<const int> hypothesis, std::span<const int> reference, const Matrix& embeddings) {
  if (hypothesis.empty() || reference.empty()) return 0.0;
  auto unit_rows = [&](std::span<const int> ids) {
    Matrix m(static_cast<Eigen::Index>(ids.size()), embeddings.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= embeddings.rows()) throw IndexError("semsim_f1: token id outside embedding table");
      const auto row = embeddings.row(ids[i]);
      const double n = row.norm();
      m.row(static_cast<Eigen::Index>(i)) = n > 0 ? (row / n).eval() : row.eval();
    }
    return m;
  };
  const Matrix h = unit_rows(hypothesis);
  const Matrix r = unit_rows(reference);
  const Matrix sim = h * r.transpose();
  const double precision = sim.rowwise().maxCoeff().mean();
  const double recall = sim.colwise().maxCoeff().mean();
  return 100.0 * std::clamp(harmonic(precision, recall), 0.0, 1.0);
}

double f1_findings(std::span<const LabelSet> predicted, std::span<const LabelSet> reference) {
  check_corpus(predicted.size(), reference.size(), "f1_findings");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const auto p = kind_sides(predicted[i]);
    const auto r = kind_sides(reference[i]);
    for (const auto& x : p) (r.contains(x) ? tp : fp) += 1;
    for (const auto& x : r) {
      if (!p.contains(x)) fn += 1;
    }
  }
  if (tp + fp + fn == 0) return 100.0;
  return 100.0 * 2 * tp / (2 * tp + fp + fn);
}

double f1_graph_pair(const GraphSet& hypothesis, const GraphSet& reference) {
  if (hypothesis.empty() && reference.empty()) return 100.0;
  if (hypothesis.empty() || reference.empty()) return 0.0;
  double tp = 0;
  for (const auto& e : hypothesis) tp += reference.contains(e) ? 1 : 0;
  return 100.0 * harmonic(tp / static_cast<double>(hypothesis.size()), tp / static_cast<double>(reference.size()));
}

double f1_graph(std::span<const GraphSet> hypotheses, std::span<const GraphSet> references) {
  check_corpus(hypotheses.size(), references.size(), "f1_graph");
  double s = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) s += f1_graph_pair(hypotheses[i], references[i]);
  return s / static_cast<double>(hypotheses.size());
}

MetricReport evaluate_corpus(std::span<const std::string> ids, std::span<const std::string> hypotheses,
                             std::span<const std::string> references, const BpeTokenizer* tokenizer,
                             const Matrix& embeddings, std::vector<StudyScore>* per_study) {
  check_corpus(hypotheses.size(), references.size(), "evaluate");
  if (ids.size() != hypotheses.size()) throw ContractError("evaluate: id count differs from hypothesis count");
  MetricReport rep;
  rep.bleu4 = bleu4(hypotheses, references);
  rep.rouge_l = rouge_l(hypotheses, references);
  std::vector<LabelSet> hl, rl;
  std::vector<GraphSet> hg, rg;
  double sem = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    hl.push_back(rule_label(hypotheses[i]));
    rl.push_back(rule_label(references[i]));
    hg.push_back(graph_from_labels(hl.back()));
    rg.push_back(graph_from_labels(rl.back()));
    double s = 0;
    if (tokenizer && embeddings.size() > 0) {
      const auto h = tokenizer->encode(hypotheses[i]);
      const auto r = tokenizer->encode(references[i]);
      s = semsim_f1(h, r, embeddings);
    }
    sem += s;
    if (per_study) {
      per_study->push_back({ids[i], 100.0 * rouge_l_pair(hypotheses[i], references[i]), s,
                            f1_graph_pair(hg.back(), rg.back()), kind_sides(hl.back()) == kind_sides(rl.back())});
    }
  }
  rep.semsim_f1 = sem / static_cast<double>(hypotheses.size());
  rep.f1_findings = f1_findings(hl, rl);
  rep.f1_graph = f1_graph(hg, rg);
  return rep;
}

std::string to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["bleu4"] = r.bleu4;
  j["rouge_l"] = r.rouge_l;
  j["semsim_f1"] = r.semsim_f1;
  j["f1_findings"] = r.f1_findings;
  j["f1_graph"] = r.f1_graph;
  return j.dump(2);
}

MetricReport metric_report_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  MetricReport r;
  r.bleu4 = j.at("bleu4").get<double>();
  r.rouge_l = j.at("rouge_l").get<double>();
  r.semsim_f1 = j.at("semsim_f1").get<double>();
  r.f1_findings = j.at("f1_findings").get<double>();
  r.f1_graph = j.at("f1_graph").get<double>();
  return r;
}

}  // namespace cxo
