#include "chexofa/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "chexofa/errors.hpp"
#include "json.hpp"

namespace cxo {

void DecodeConfig::validate() const {
  if (beam_size < 1) throw ConfigError("decode.beam_size must be >= 1");
  if (max_len < 1) throw ConfigError("decode.max_len must be >= 1");
  if (!(alpha >= 0)) throw ConfigError("decode.alpha must be >= 0");
}

double length_penalty(int length, double alpha) {
  if (length < 1) throw ContractError("length_penalty: length must be >= 1");
  return std::pow((5.0 + length) / 6.0, alpha);
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

Matrix ModelScorer::next_log_probs(std::span<const std::vector<int>> prefixes, std::span<const int> parents) {
  if (parents.empty()) {
    for (const auto& p : prefixes) {
      if (!p.empty()) throw ContractError("ModelScorer: first call expects empty prefixes");
    }
    return log_softmax_rows(decoder_.start(static_cast<int>(prefixes.size())));
  }
  std::vector<int> last;
  for (const auto& p : prefixes) {
    if (p.empty()) throw ContractError("ModelScorer: empty prefix after the first step");
    last.push_back(p.back());
  }
  return log_softmax_rows(decoder_.step(parents, last));
}

namespace {

struct Candidate {
  BeamHypothesis hyp;
  double score = 0;
  int parent = -1;
};

bool better(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.hyp.tokens < b.hyp.tokens;
}

}  // namespace

BeamResult beam_search(StepScorer& scorer, const DecodeConfig& config) {
  config.validate();
  const int vocab = scorer.vocab_size();
  const auto width = static_cast<std::size_t>(config.beam_size);
  const int per_hyp = std::min(config.beam_size, vocab);

  std::vector<Candidate> live(1);
  std::optional<Candidate> best_finished;
  std::vector<std::vector<int>> prefixes(1);
  std::vector<int> parents;
  Matrix lp = scorer.next_log_probs(prefixes, parents);
  std::vector<int> ids(static_cast<std::size_t>(vocab));

  for (int len = 1;; ++len) {
    if (lp.rows() != static_cast<Eigen::Index>(live.size()) || lp.cols() != vocab) {
      throw ShapeError("beam_search: scorer returned the wrong shape");
    }
    std::vector<Candidate> pool;
    for (std::size_t i = 0; i < live.size(); ++i) {
      std::iota(ids.begin(), ids.end(), 0);
      std::partial_sort(ids.begin(), ids.begin() + per_hyp, ids.end(), [&](int a, int b) {
        const double x = lp(static_cast<Eigen::Index>(i), a), y = lp(static_cast<Eigen::Index>(i), b);
        return x != y ? x > y : a < b;
      });
      for (int k = 0; k < per_hyp; ++k) {
        const int tok = ids[static_cast<std::size_t>(k)];
        Candidate c;
        c.hyp.tokens = live[i].hyp.tokens;
        c.hyp.tokens.push_back(tok);
        c.hyp.raw_logprob = live[i].hyp.raw_logprob + lp(static_cast<Eigen::Index>(i), tok);
        c.hyp.finished = tok == kEosId;
        c.score = c.hyp.raw_logprob / length_penalty(len, config.alpha);
        c.parent = static_cast<int>(i);
        pool.push_back(std::move(c));
      }
    }
    // Newly finished hypotheses take beam slots but are never extended.
    std::sort(pool.begin(), pool.end(), better);
    if (pool.size() > width) pool.resize(width);

    std::vector<Candidate> next;
    for (auto& c : pool) {
      if (c.hyp.finished) {
        if (!best_finished || better(c, *best_finished)) best_finished = c;
      } else {
        next.push_back(std::move(c));
      }
    }
    if (next.empty() || len == config.max_len) {
      if (best_finished) {
        const auto& b = best_finished->hyp;
        return BeamResult{std::vector<int>(b.tokens.begin(), b.tokens.end() - 1), best_finished->score, b.raw_logprob, true};
      }
      const auto& top = next.front();
      return BeamResult{top.hyp.tokens, top.score, top.hyp.raw_logprob, false};
    }
    prefixes.clear();
    parents.clear();
    for (const auto& c : next) {
      prefixes.push_back(c.hyp.tokens);
      parents.push_back(c.parent);
    }
    live = std::move(next);
    lp = scorer.next_log_probs(prefixes, parents);
  }
}

BeamResult beam_search(const Model& model, const EncoderInput& input, const DecodeConfig& config) {
  config.validate();
  const Memory memory = model.encode(input);
  ModelScorer scorer(model, memory);
  DecodeConfig c = config;
  c.max_len = std::min(config.max_len, model.config().max_text_len);
  return beam_search(scorer, c);
}

std::string render_output(const BpeTokenizer& tokenizer, std::span<const int> tokens) {
  const auto sep = std::find(tokens.begin(), tokens.end(), kSepId);
  if (sep == tokens.end()) return tokenizer.decode(tokens);
  const auto left = tokenizer.decode(std::span<const int>(tokens.begin(), sep));
  const auto right = tokenizer.decode(std::span<const int>(sep + 1, tokens.end()));
  return left + " " + std::string(kSepText) + " " + right;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(' ');
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(' ');
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

std::pair<LabelSet, std::string> parse_cls_output(const std::string& text) {
  const auto pos = text.find(kSepText);
  if (pos == std::string::npos) return {LabelSet{}, text};
  auto labels = parse_labels(trim(std::string_view(text).substr(0, pos)));
  if (!labels) return {LabelSet{}, text};
  return {*labels, trim(std::string_view(text).substr(pos + kSepText.size()))};
}

std::string prediction_to_json(const Prediction& p) {
  nlohmann::ordered_json j;
  j["id"] = p.id;
  j["task"] = p.task;
  j["prediction"] = p.prediction;
  j["score"] = p.score;
  if (p.labels) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& f : canonical_order(*p.labels)) {
      const auto one = serialize_labels(LabelSet{f});
      arr.push_back(one.substr(one.find(':') + 2));
    }
    j["labels"] = arr;
  }
  return j.dump();
}

Prediction prediction_from_json(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("prediction: ") + e.what());
  }
  Prediction p;
  try {
    p.id = j.at("id").get<std::string>();
    p.task = j.at("task").get<std::string>();
    p.prediction = j.at("prediction").get<std::string>();
    p.score = j.at("score").get<double>();
    if (j.contains("labels")) {
      std::string joined = "labels :";
      bool first = true;
      for (const auto& item : j.at("labels")) {
        joined += (first ? " " : " , ") + item.get<std::string>();
        first = false;
      }
      auto parsed = j.at("labels").empty() ? std::optional<LabelSet>(LabelSet{}) : parse_labels(joined);
      if (!parsed) throw FormatError("prediction: bad labels for " + p.id);
      p.labels = *parsed;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("prediction: ") + e.what());
  }
  return p;
}

void write_predictions(const std::filesystem::path& path, std::span<const Prediction> preds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& p : preds) out << prediction_to_json(p) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing predictions " + path.string());
  std::vector<Prediction> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(prediction_from_json(line));
  }
  return out;
}

}  // namespace cxo
