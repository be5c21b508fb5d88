#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "chexofa/finding.hpp"
#include "chexofa/image.hpp"

namespace cxo {

inline constexpr int kImageSize = 64;

struct CorpusConfig {
  int n_train = 2000;
  int n_val = 200;
  int n_test = 400;
  std::uint64_t seed = 0;
  double p_img_only = 0.15;  // chance a positive finding is left out of the findings text
  double p_filler = 0.3;     // chance for each of two neutral filler sentences
  double p_kind = 0.25;      // marginal of every positive kind

  void validate() const;
};

enum class Split { kTrain, kVal, kTest };
std::string_view to_string(Split s);
Split parse_split(std::string_view s);

struct StudyRecord {
  std::string id;
  std::string image_path;  // relative to the corpus directory
  Image image;
  std::string findings;
  std::string impression;
  LabelSet labels;
  LabelSet image_only;
};

std::uint64_t record_seed(std::uint64_t corpus_seed, std::string_view id);

LabelSet sample_labels(std::mt19937_64& rng, double p_kind = 0.25);

/// Deterministic rendering of `labels` over a noisy background (mean 40, sigma 8).
Image render_image(const LabelSet& labels, std::uint64_t seed);

/// Fixed-threshold pixel statistics that recover which kinds were drawn.
/// Returns {kNoFinding} when nothing is detected.
std::set<Kind> detect_findings(const Image& img);

std::string generate_findings_text(const LabelSet& labels, const LabelSet& image_only, std::mt19937_64& rng,
                                   double p_filler = 0.3);
std::string generate_impression_text(const LabelSet& labels, std::mt19937_64& rng);

StudyRecord generate_record(const CorpusConfig& config, Split split, int index);

/// Writes {train,val,test}.jsonl and images/<id>.pgm under `dir`.
void generate_corpus(const CorpusConfig& config, const std::filesystem::path& dir);

std::string record_to_json(const StudyRecord& r);
StudyRecord record_from_json(const std::string& line);
std::vector<StudyRecord> load_split(const std::filesystem::path& dir, Split split, bool with_images = true);

}  // namespace cxo
