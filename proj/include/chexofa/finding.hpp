#pragma once

#include <array>
#include <compare>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace cxo {

enum class Kind { kOpacity, kEffusion, kCardiomegaly, kNodule, kPneumothorax, kDevice, kFracture, kNoFinding };
enum class Laterality { kNone, kLeft, kRight, kBilateral };
enum class Severity { kNone, kMild, kModerate, kSevere };

inline constexpr std::array<Kind, 7> kPositiveKinds = {Kind::kOpacity, Kind::kEffusion, Kind::kCardiomegaly, Kind::kNodule,
                                                       Kind::kPneumothorax, Kind::kDevice, Kind::kFracture};

struct Finding {
  Kind kind = Kind::kNoFinding;
  Laterality laterality = Laterality::kNone;
  Severity severity = Severity::kNone;

  auto operator<=>(const Finding&) const = default;
};

using LabelSet = std::set<Finding>;

std::string_view to_string(Kind k);
std::string_view to_string(Laterality l);
std::string_view to_string(Severity s);
std::optional<Kind> parse_kind(std::string_view s);
std::optional<Laterality> parse_laterality(std::string_view s);
std::optional<Severity> parse_severity(std::string_view s);

/// Lateralities a kind can carry in generated studies; empty means kNone only.
std::vector<Laterality> allowed_lateralities(Kind k);
bool has_severity(Kind k);

/// Throws ContractError when `labels` violates the finding invariants.
void validate(const LabelSet& labels);

/// Findings in the canonical serialization order (kind names ascending).
std::vector<Finding> canonical_order(const LabelSet& labels);

/// "labels : cardiomegaly mild , opacity left severe"; no_finding renders as
/// "no - finding" and kNone modifiers are omitted.
std::string serialize_labels(const LabelSet& labels);
std::optional<LabelSet> parse_labels(std::string_view text);

/// Kind plus laterality, the key used for factual matching.
struct KindSide {
  Kind kind;
  Laterality laterality;
  auto operator<=>(const KindSide&) const = default;
};
std::set<KindSide> kind_sides(const LabelSet& labels);

}  // namespace cxo
