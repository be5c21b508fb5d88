#include "chexofa/finding.hpp"

#include <algorithm>
#include <sstream>

#include "chexofa/errors.hpp"

namespace cxo {

std::string_view to_string(Kind k) {
  switch (k) {
    case Kind::kOpacity: return "opacity";
    case Kind::kEffusion: return "effusion";
    case Kind::kCardiomegaly: return "cardiomegaly";
    case Kind::kNodule: return "nodule";
    case Kind::kPneumothorax: return "pneumothorax";
    case Kind::kDevice: return "device";
    case Kind::kFracture: return "fracture";
    case Kind::kNoFinding: return "no_finding";
  }
  return "?";
}

std::string_view to_string(Laterality l) {
  switch (l) {
    case Laterality::kNone: return "none";
    case Laterality::kLeft: return "left";
    case Laterality::kRight: return "right";
    case Laterality::kBilateral: return "bilateral";
  }
  return "?";
}

std::string_view to_string(Severity s) {
  switch (s) {
    case Severity::kNone: return "none";
    case Severity::kMild: return "mild";
    case Severity::kModerate: return "moderate";
    case Severity::kSevere: return "severe";
  }
  return "?";
}

std::optional<Kind> parse_kind(std::string_view s) {
  for (auto k : kPositiveKinds) {
    if (to_string(k) == s) return k;
  }
  if (s == "no_finding") return Kind::kNoFinding;
  return std::nullopt;
}

std::optional<Laterality> parse_laterality(std::string_view s) {
  for (auto l : {Laterality::kNone, Laterality::kLeft, Laterality::kRight, Laterality::kBilateral}) {
    if (to_string(l) == s) return l;
  }
  return std::nullopt;
}

std::optional<Severity> parse_severity(std::string_view s) {
  for (auto v : {Severity::kNone, Severity::kMild, Severity::kModerate, Severity::kSevere}) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

std::vector<Laterality> allowed_lateralities(Kind k) {
  switch (k) {
    case Kind::kOpacity:
    case Kind::kEffusion: return {Laterality::kLeft, Laterality::kRight, Laterality::kBilateral};
    case Kind::kNodule:
    case Kind::kPneumothorax:
    case Kind::kDevice:
    case Kind::kFracture: return {Laterality::kLeft, Laterality::kRight};
    case Kind::kCardiomegaly:
    case Kind::kNoFinding: return {};
  }
  return {};
}

bool has_severity(Kind k) {
  return k == Kind::kOpacity || k == Kind::kEffusion || k == Kind::kCardiomegaly || k == Kind::kPneumothorax;
}

void validate(const LabelSet& labels) {
  bool normal = false;
  bool positive = false;
  std::set<Kind> seen;
  for (const auto& f : labels) {
    if (!seen.insert(f.kind).second) throw ContractError("labels: kind " + std::string(to_string(f.kind)) + " appears twice");
    if (f.kind == Kind::kNoFinding) {
      normal = true;
      if (f.laterality != Laterality::kNone || f.severity != Severity::kNone) {
        throw ContractError("labels: no_finding must have laterality and severity none");
      }
    } else {
      positive = true;
    }
  }
  if (normal && positive) throw ContractError("labels: no_finding combined with a positive finding");
}

std::vector<Finding> canonical_order(const LabelSet& labels) {
  std::vector<Finding> out(labels.begin(), labels.end());
  std::sort(out.begin(), out.end(), [](const Finding& a, const Finding& b) {
    return std::make_pair(to_string(a.kind), a) < std::make_pair(to_string(b.kind), b);
  });
  return out;
}

std::string serialize_labels(const LabelSet& labels) {
  std::string out = "labels :";
  bool first = true;
  for (const auto& f : canonical_order(labels)) {
    if (!first) out += " ,";
    first = false;
    out += f.kind == Kind::kNoFinding ? " no - finding" : " " + std::string(to_string(f.kind));
    if (f.laterality != Laterality::kNone) out += " " + std::string(to_string(f.laterality));
    if (f.severity != Severity::kNone) out += " " + std::string(to_string(f.severity));
  }
  return out;
}

std::optional<LabelSet> parse_labels(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::vector<std::string> toks;
  for (std::string t; is >> t;) toks.push_back(t);
  if (toks.size() < 2 || toks[0] != "labels" || toks[1] != ":") return std::nullopt;
  LabelSet labels;
  std::vector<std::vector<std::string>> groups(1);
  for (std::size_t i = 2; i < toks.size(); ++i) {
    if (toks[i] == ",") {
      groups.emplace_back();
    } else {
      groups.back().push_back(toks[i]);
    }
  }
  if (groups.size() == 1 && groups[0].empty()) return labels;
  for (const auto& g : groups) {
    if (g.empty()) return std::nullopt;
    Finding f;
    std::size_t i = 0;
    if (g.size() >= 3 && g[0] == "no" && g[1] == "-" && g[2] == "finding") {
      f.kind = Kind::kNoFinding;
      i = 3;
    } else {
      auto k = parse_kind(g[0]);
      if (!k || *k == Kind::kNoFinding) return std::nullopt;
      f.kind = *k;
      i = 1;
    }
    if (i < g.size()) {
      if (auto l = parse_laterality(g[i]); l && *l != Laterality::kNone) {
        f.laterality = *l;
        ++i;
      }
    }
    if (i < g.size()) {
      if (auto s = parse_severity(g[i]); s && *s != Severity::kNone) {
        f.severity = *s;
        ++i;
      }
    }
    if (i != g.size()) return std::nullopt;
    labels.insert(f);
  }
  try {
    validate(labels);
  } catch (const ContractError&) {
    return std::nullopt;
  }
  return labels;
}

std::set<KindSide> kind_sides(const LabelSet& labels) {
  std::set<KindSide> out;
  for (const auto& f : labels) out.insert({f.kind, f.laterality});
  return out;
}

}  // namespace cxo
