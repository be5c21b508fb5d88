#include "chexofa/synthcxr.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"

#include "chexofa/errors.hpp"

namespace cxo {
namespace {

using json = nlohmann::json;

struct KindTemplates {
  std::vector<std::string> findings;
  std::vector<std::string> impression;
  std::string negated_term;
};

// Placeholders: {sev} {Sev} {lat} {Lat} {latlung}.
const KindTemplates& templates(Kind k) {
  static const std::vector<KindTemplates> table = {
      {{"There is a {sev} opacity in the {latlung}.", "A {sev} {lat} airspace opacity is present.",
        "{Sev} patchy consolidation is seen in the {latlung}."},
       {"{Sev} {lat} opacity.", "{Sev} consolidation in the {latlung}.", "{Lat} {sev} airspace opacity."},
       "focal opacity"},
      {{"There is a {sev} {lat} pleural effusion.", "A {sev} effusion is noted on the {lat} side.",
        "{Sev} {lat} pleural fluid is present."},
       {"{Sev} {lat} pleural effusion.", "{Lat} {sev} effusion.", "{Sev} {lat} pleural fluid."},
       "pleural effusion"},
      {{"There is {sev} cardiomegaly.", "The heart shows {sev} cardiomegaly.",
        "{Sev} enlargement of the cardiac silhouette is seen."},
       {"{Sev} cardiomegaly.", "Stable {sev} cardiomegaly.", "{Sev} enlargement of the cardiac silhouette."},
       "cardiomegaly"},
      {{"A nodule is seen in the {lat} upper lobe.", "There is a {lat} pulmonary nodule.",
        "A nodular density projects over the {lat} apex."},
       {"{Lat} pulmonary nodule.", "Nodule in the {lat} upper lobe.", "{Lat} apical nodular density."},
       "pulmonary nodule"},
      {{"There is a {sev} {lat} pneumothorax.", "A {sev} pneumothorax is seen at the {lat} apex.",
        "{Lat} apical pneumothorax is {sev} in size."},
       {"{Sev} {lat} pneumothorax.", "{Lat} {sev} pneumothorax.", "{Sev} pneumothorax at the {lat} apex."},
       "pneumothorax"},
      {{"A {lat} central venous catheter is in place.", "There is a {lat} sided support device.",
        "A {lat} chest tube is in place."},
       {"{Lat} central venous catheter in place.", "{Lat} support device.", "{Lat} chest tube in place."},
       "support device"},
      {{"There is a {lat} rib fracture.", "A fracture of the {lat} lower rib is noted.", "{Lat} sided rib fracture is seen."},
       {"{Lat} rib fracture.", "Fracture of the {lat} rib.", "{Lat} lower rib fracture."},
       "rib fracture"},
  };
  return table.at(static_cast<std::size_t>(k));
}

const std::vector<std::string> kNormalFindings = {"No acute cardiopulmonary process.",
                                                  "No acute cardiopulmonary abnormality.",
                                                  "The lungs are clear with no acute cardiopulmonary process."};
const std::string kNormalImpression = "No acute cardiopulmonary process.";
const std::vector<std::string> kNegations = {"No evidence of {term}.", "There is no {term}.", "Negative for {term}.",
                                             "The study is free of {term}."};
const std::vector<std::string> kFillers = {"Lung volumes are within normal limits.", "The mediastinal contours are stable.",
                                           "Comparison is made to the prior study.", "The patient is slightly rotated.",
                                           "Degenerative changes are seen in the thoracic spine."};

template <typename T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
  return v[d(rng)];
}

std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size()) s.replace(pos, from.size(), to);
}

std::string fill(std::string t, const Finding& f) {
  const std::string sev(to_string(f.severity));
  const std::string lat(to_string(f.laterality));
  replace_all(t, "{sev}", sev);
  replace_all(t, "{Sev}", capitalize(sev));
  replace_all(t, "{latlung}", f.laterality == Laterality::kBilateral ? "bilateral lungs" : lat + " lung");
  replace_all(t, "{lat}", lat);
  replace_all(t, "{Lat}", capitalize(lat));
  return t;
}

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) {
    if (!out.empty()) out += ' ';
    out += p;
  }
  return out;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Canvas of base intensities before noise.
class Canvas {
 public:
  Canvas() : v_(kImageSize * kImageSize, 40.0) {}

  double& at(int r, int c) { return v_[static_cast<std::size_t>(r * kImageSize + c)]; }

  void brighten(int r, int c, double value) {
    if (r < 0 || c < 0 || r >= kImageSize || c >= kImageSize) return;
    at(r, c) = std::max(at(r, c), value);
  }
  void set(int r, int c, double value) {
    if (r < 0 || c < 0 || r >= kImageSize || c >= kImageSize) return;
    at(r, c) = value;
  }
  void disk(int cy, int cx, int radius, double value) {
    for (int r = cy - radius; r <= cy + radius; ++r)
      for (int c = cx - radius; c <= cx + radius; ++c)
        if ((r - cy) * (r - cy) + (c - cx) * (c - cx) <= radius * radius) brighten(r, c, value);
  }
  void ellipse(int cy, int cx, int ry, int rx, double value) {
    for (int r = cy - ry; r <= cy + ry; ++r)
      for (int c = cx - rx; c <= cx + rx; ++c) {
        const double dy = double(r - cy) / ry, dx = double(c - cx) / rx;
        if (dy * dy + dx * dx <= 1.0) brighten(r, c, value);
      }
  }
  void rect(int r0, int r1, int c0, int c1, double value) {
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) brighten(r, c, value);
  }

 private:
  std::vector<double> v_;
};

// Radiological convention: the patient's right is on the image's left.
std::vector<bool> sides(Laterality l) {  // {image-left, image-right}
  return {l == Laterality::kRight || l == Laterality::kBilateral, l == Laterality::kLeft || l == Laterality::kBilateral};
}

int severity_index(Severity s) {
  switch (s) {
    case Severity::kMild: return 0;
    case Severity::kModerate: return 1;
    case Severity::kSevere: return 2;
    case Severity::kNone: return 1;
  }
  return 1;
}

double region_mean(const Image& img, int r0, int r1, int c0, int c1) {
  double s = 0;
  int n = 0;
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) {
      s += img.at(r, c);
      ++n;
    }
  return s / n;
}

LabelSet labels_from_json(const json& arr) {
  LabelSet out;
  for (const auto& j : arr) {
    auto k = parse_kind(j.at("kind").get<std::string>());
    auto l = parse_laterality(j.at("laterality").get<std::string>());
    auto s = parse_severity(j.at("severity").get<std::string>());
    if (!k || !l || !s) throw FormatError("corpus: bad label " + j.dump());
    out.insert({*k, *l, *s});
  }
  validate(out);
  return out;
}

json labels_to_json(const LabelSet& labels) {
  json arr = json::array();
  for (const auto& f : canonical_order(labels)) {
    arr.push_back({{"kind", to_string(f.kind)}, {"laterality", to_string(f.laterality)}, {"severity", to_string(f.severity)}});
  }
  return arr;
}

}  // namespace

void CorpusConfig::validate() const {
  if (n_train < 1 || n_val < 1 || n_test < 1) throw ConfigError("corpus: split sizes must be >= 1");
  for (double p : {p_img_only, p_filler, p_kind}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("corpus: probabilities must lie in [0, 1]");
  }
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

std::uint64_t record_seed(std::uint64_t corpus_seed, std::string_view id) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : id) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(corpus_seed ^ splitmix64(h));
}

LabelSet sample_labels(std::mt19937_64& rng, double p_kind) {
  LabelSet labels;
  std::bernoulli_distribution present(p_kind);
  for (auto k : kPositiveKinds) {
    if (!present(rng)) continue;
    Finding f{k, Laterality::kNone, Severity::kNone};
    if (auto lats = allowed_lateralities(k); !lats.empty()) f.laterality = pick(lats, rng);
    if (has_severity(k)) f.severity = pick(std::vector{Severity::kMild, Severity::kModerate, Severity::kSevere}, rng);
    labels.insert(f);
  }
  if (labels.empty()) labels.insert({Kind::kNoFinding, Laterality::kNone, Severity::kNone});
  return labels;
}

Image render_image(const LabelSet& labels, std::uint64_t seed) {
  validate(labels);
  Canvas cv;
  const int left_x[2] = {16, 48};
  for (const auto& f : labels) {
    const int sv = severity_index(f.severity);
    const auto on = sides(f.laterality);
    switch (f.kind) {
      case Kind::kCardiomegaly:
        cv.ellipse(40, 32, 10, std::array{11, 13, 15}[sv], 115);
        break;
      case Kind::kOpacity:
        for (int s = 0; s < 2; ++s)
          if (on[s]) cv.disk(24, left_x[s], std::array{5, 7, 9}[sv], 100);
        break;
      case Kind::kEffusion: {
        const int h = std::array{3, 5, 7}[sv];
        for (int s = 0; s < 2; ++s)
          if (on[s]) cv.rect(kImageSize - h, kImageSize - 1, s * 32, s * 32 + 31, 150);
        break;
      }
      case Kind::kNodule:
        for (int s = 0; s < 2; ++s)
          if (on[s]) cv.disk(9, s ? 52 : 12, 2, 220);
        break;
      case Kind::kDevice:
        for (int s = 0; s < 2; ++s)
          if (on[s]) cv.rect(0, 20, s ? 38 : 24, s ? 39 : 25, 250);
        break;
      case Kind::kFracture:
        for (int s = 0; s < 2; ++s)
          if (on[s]) cv.rect(50, 51, s ? 52 : 4, s ? 59 : 11, 200);
        break;
      case Kind::kPneumothorax:
      case Kind::kNoFinding:
        break;
    }
  }
  // The dark crescent is drawn last so it stays dark where it overlaps.
  for (const auto& f : labels) {
    if (f.kind != Kind::kPneumothorax) continue;
    const int w = std::array{3, 4, 6}[severity_index(f.severity)];
    const auto on = sides(f.laterality);
    for (int r = 6; r <= 40; ++r) {
      const int width = static_cast<int>(std::lround(w * std::sin(std::numbers::pi * (r - 6) / 34.0)));
      for (int c = 0; c < width; ++c) {
        if (on[0]) cv.set(r, c, 5);
        if (on[1]) cv.set(r, kImageSize - 1 - c, 5);
      }
    }
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 8.0);
  Image img(kImageSize, kImageSize);
  for (int r = 0; r < kImageSize; ++r)
    for (int c = 0; c < kImageSize; ++c) {
      const double v = cv.at(r, c) + noise(rng);
      img.at(r, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  return img;
}

std::set<Kind> detect_findings(const Image& img) {
  if (img.rows != kImageSize || img.cols != kImageSize) throw ShapeError("detect_findings: expected a 64x64 image");
  std::set<Kind> found;
  auto either = [](bool a, bool b) { return a || b; };
  if (either(region_mean(img, 22, 26, 14, 18) > 70, region_mean(img, 22, 26, 46, 50) > 70)) found.insert(Kind::kOpacity);
  if (either(region_mean(img, 61, 63, 4, 27) > 100, region_mean(img, 61, 63, 36, 59) > 100)) found.insert(Kind::kEffusion);
  if (region_mean(img, 38, 42, 29, 35) > 80) found.insert(Kind::kCardiomegaly);
  if (either(region_mean(img, 8, 10, 11, 13) > 150, region_mean(img, 8, 10, 51, 53) > 150)) found.insert(Kind::kNodule);
  if (either(region_mean(img, 16, 30, 0, 1) < 20, region_mean(img, 16, 30, 62, 63) < 20)) found.insert(Kind::kPneumothorax);
  if (either(region_mean(img, 2, 6, 24, 25) > 180, region_mean(img, 2, 6, 38, 39) > 180)) found.insert(Kind::kDevice);
  if (either(region_mean(img, 50, 51, 5, 10) > 150, region_mean(img, 50, 51, 53, 58) > 150)) found.insert(Kind::kFracture);
  if (found.empty()) found.insert(Kind::kNoFinding);
  return found;
}

std::string generate_findings_text(const LabelSet& labels, const LabelSet& image_only, std::mt19937_64& rng,
                                   double p_filler) {
  validate(labels);
  for (const auto& f : image_only) {
    if (!labels.contains(f)) throw ContractError("findings: image_only must be a subset of labels");
  }
  std::vector<std::string> sentences;
  std::vector<Kind> absent;
  for (auto k : kPositiveKinds) {
    const bool present = std::any_of(labels.begin(), labels.end(), [k](const Finding& f) { return f.kind == k; });
    if (!present) absent.push_back(k);
  }
  for (const auto& f : labels) {
    if (image_only.contains(f)) continue;
    if (f.kind == Kind::kNoFinding) {
      sentences.push_back(pick(kNormalFindings, rng));
    } else {
      sentences.push_back(fill(pick(templates(f.kind).findings, rng), f));
    }
  }
  std::shuffle(absent.begin(), absent.end(), rng);
  for (std::size_t i = 0; i < std::min<std::size_t>(2, absent.size()); ++i) {
    std::string s = pick(kNegations, rng);
    replace_all(s, "{term}", templates(absent[i]).negated_term);
    sentences.push_back(s);
  }
  std::bernoulli_distribution filler(p_filler);
  for (int i = 0; i < 2; ++i) {
    if (filler(rng)) sentences.push_back(pick(kFillers, rng));
  }
  std::shuffle(sentences.begin(), sentences.end(), rng);
  return join(sentences);
}

std::string generate_impression_text(const LabelSet& labels, std::mt19937_64& rng) {
  validate(labels);
  std::vector<std::string> clauses;
  for (const auto& f : canonical_order(labels)) {
    if (f.kind == Kind::kNoFinding) {
      clauses.push_back(kNormalImpression);
    } else {
      clauses.push_back(fill(pick(templates(f.kind).impression, rng), f));
    }
  }
  return join(clauses);
}

StudyRecord generate_record(const CorpusConfig& config, Split split, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%05d", std::string(to_string(split)).c_str(), index);
  StudyRecord r;
  r.id = buf;
  r.image_path = "images/" + r.id + ".pgm";
  const auto seed = record_seed(config.seed, r.id);
  std::mt19937_64 rng(seed);
  r.labels = sample_labels(rng, config.p_kind);
  std::bernoulli_distribution omit(config.p_img_only);
  for (const auto& f : r.labels) {
    if (f.kind != Kind::kNoFinding && omit(rng)) r.image_only.insert(f);
  }
  r.findings = generate_findings_text(r.labels, r.image_only, rng, config.p_filler);
  r.impression = generate_impression_text(r.labels, rng);
  r.image = render_image(r.labels, splitmix64(seed));
  return r;
}

std::string record_to_json(const StudyRecord& r) {
  json j;
  j["id"] = r.id;
  j["image_path"] = r.image_path;
  j["findings"] = r.findings;
  j["impression"] = r.impression;
  j["labels"] = labels_to_json(r.labels);
  j["image_only"] = labels_to_json(r.image_only);
  return j.dump();
}

StudyRecord record_from_json(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(std::string("corpus: ") + e.what());
  }
  StudyRecord r;
  r.id = j.at("id").get<std::string>();
  r.image_path = j.at("image_path").get<std::string>();
  r.findings = j.at("findings").get<std::string>();
  r.impression = j.at("impression").get<std::string>();
  r.labels = labels_from_json(j.at("labels"));
  r.image_only = labels_from_json(j.at("image_only"));
  return r;
}

void generate_corpus(const CorpusConfig& config, const std::filesystem::path& dir) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create corpus directory " + dir.string() + ": " + ec.message());
  for (auto [split, n] : {std::pair{Split::kTrain, config.n_train}, {Split::kVal, config.n_val}, {Split::kTest, config.n_test}}) {
    const auto path = dir / (std::string(to_string(split)) + ".jsonl");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    for (int i = 0; i < n; ++i) {
      const auto r = generate_record(config, split, i);
      out << record_to_json(r) << '\n';
      write_pgm(dir / r.image_path, r.image);
    }
  }
}

std::vector<StudyRecord> load_split(const std::filesystem::path& dir, Split split, bool with_images) {
  const auto path = dir / (std::string(to_string(split)) + ".jsonl");
  std::ifstream in(path);
  if (!in) throw MissingArtifactError(path.string() + " (produced by gen-data)");
  std::vector<StudyRecord> out;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    auto r = record_from_json(line);
    if (with_images) r.image = read_pgm(dir / r.image_path);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace cxo
