#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

#include "doctest.h"

#include "chexofa/errors.hpp"
#include "chexofa/metrics.hpp"
#include "chexofa/synthcxr.hpp"
#include "metric_oracles.hpp"

using namespace cxo;
using namespace cxo::testing;

TEST_CASE("bleu examples") {
  const std::vector<std::string> a = {"the cat sat on the mat"};
  CHECK(bleu4(a, a) == doctest::Approx(100.0));
  CHECK(bleu4(std::vector<std::string>{"the cat"}, std::vector<std::string>{"dog runs far away"}) == doctest::Approx(0.0));
  // Hand count: p1 = 5/6, p2 = (3+1)/(5+1), p3 = (1+1)/(4+1), p4 = (0+1)/(3+1), equal lengths.
  const double hand = 100 * std::pow(5.0 / 6 * 4.0 / 6 * 2.0 / 5 * 1.0 / 4, 0.25);
  CHECK(bleu4(a, std::vector<std::string>{"the cat is on the mat"}) == doctest::Approx(hand).epsilon(1e-12));
  CHECK(hand == doctest::Approx(48.55).epsilon(1e-3));
  CHECK_THROWS_AS(bleu4(std::vector<std::string>{}, std::vector<std::string>{}), ContractError);
}

TEST_CASE("rouge-l examples") {
  CHECK(rouge_l(std::vector<std::string>{"a b c"}, std::vector<std::string>{"a b c"}) == doctest::Approx(100.0));
  CHECK(rouge_l(std::vector<std::string>{"a b"}, std::vector<std::string>{"c d"}) == doctest::Approx(0.0));
  CHECK(rouge_l(std::vector<std::string>{"a b c d"}, std::vector<std::string>{"a c b d"}) == doctest::Approx(75.0));
  CHECK_THROWS_AS(rouge_l(std::vector<std::string>{}, std::vector<std::string>{}), ContractError);
}

TEST_CASE("bleu and rouge-l agree with naive implementations") {
  std::mt19937_64 rng(17);
  for (int i = 0; i < 50; ++i) {
    std::vector<std::string> h, r;
    const int n = 1 + i % 4;
    for (int j = 0; j < n; ++j) {
      h.push_back(random_sentence(rng));
      r.push_back(random_sentence(rng));
    }
    CHECK(std::abs(bleu4(h, r) - naive_bleu(h, r)) < 1e-6);
    double naive = 0;
    for (int j = 0; j < n; ++j) naive += naive_rouge_pair(h[j], r[j]);
    CHECK(std::abs(rouge_l(h, r) - 100 * naive / n) < 1e-6);
  }
}

TEST_CASE("semsim examples") {
  Matrix emb(3, 2);
  emb << 1, 0, 0, 1, 1, 1;
  const std::vector<int> a = {0, 2}, b = {1}, c = {0};
  CHECK(semsim_f1(a, a, emb) == doctest::Approx(100.0));
  CHECK(semsim_f1(c, b, emb) == doctest::Approx(0.0));
  // P = (0 + 1/sqrt2) / 2, R = 1/sqrt2.
  const double p = (0 + std::sqrt(0.5)) / 2, r = std::sqrt(0.5);
  CHECK(semsim_f1(a, b, emb) == doctest::Approx(100 * 2 * p * r / (p + r)).epsilon(1e-12));
  CHECK(semsim_f1(std::vector<int>{}, b, emb) == 0.0);
}

TEST_CASE("findings and graph F1 examples") {
  const Finding a{Kind::kOpacity, Laterality::kLeft, Severity::kMild};
  const Finding b{Kind::kNodule, Laterality::kRight, Severity::kNone};
  const Finding c{Kind::kFracture, Laterality::kLeft, Severity::kNone};
  const std::vector<LabelSet> ref = {{a}, {c}};
  CHECK(f1_findings(ref, ref) == doctest::Approx(100.0));
  CHECK(f1_findings(std::vector<LabelSet>{{}, {}}, ref) == doctest::Approx(0.0));
  CHECK(f1_findings(std::vector<LabelSet>{{a}, {b}}, ref) == doctest::Approx(50.0));

  const GraphSet h = {{Kind::kOpacity, "left"}};
  const GraphSet r = {{Kind::kOpacity, "left"}, {Kind::kOpacity, "severe"}};
  CHECK(f1_graph_pair(h, r) == doctest::Approx(200.0 / 3));
  CHECK(f1_graph_pair({}, {}) == 100.0);
  CHECK(graph_extract("There is a severe opacity in the left lung.") == GraphSet{{Kind::kOpacity, "left"}, {Kind::kOpacity, "severe"}});
}

TEST_CASE("metric properties on generated reports") {
  CorpusConfig cfg;
  std::vector<std::string> ids, hyps, refs;
  for (int i = 0; i < 60; ++i) {
    const auto r = generate_record(cfg, Split::kVal, i);
    const auto o = generate_record(cfg, Split::kVal, (i * 7 + 3) % 60);
    ids.push_back(r.id);
    refs.push_back(r.impression);
    hyps.push_back(i % 3 == 0 ? r.impression : o.impression);
    CHECK(f1_graph_pair(graph_extract(r.impression), graph_extract(r.impression)) == 100.0);
    CHECK(f1_graph_pair(graph_extract(r.findings), graph_extract(r.findings)) == 100.0);
  }
  Matrix emb = Matrix::Identity(4, 4);
  const auto rep = evaluate_corpus(ids, hyps, refs, nullptr, emb);
  for (double v : {rep.bleu4, rep.rouge_l, rep.semsim_f1, rep.f1_findings, rep.f1_graph}) {
    CHECK(v >= 0);
    CHECK(v <= 100);
  }
  std::vector<std::size_t> perm(ids.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(8);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::string> pi, ph, pr;
  for (auto k : perm) {
    pi.push_back(ids[k]);
    ph.push_back(hyps[k]);
    pr.push_back(refs[k]);
  }
  const auto rep2 = evaluate_corpus(pi, ph, pr, nullptr, emb);
  CHECK(rep2.bleu4 == doctest::Approx(rep.bleu4).epsilon(1e-12));
  CHECK(rep2.rouge_l == doctest::Approx(rep.rouge_l).epsilon(1e-12));
  CHECK(rep2.f1_findings == doctest::Approx(rep.f1_findings).epsilon(1e-12));
  CHECK(rep2.f1_graph == doctest::Approx(rep.f1_graph).epsilon(1e-12));

  const auto same = evaluate_corpus(ids, refs, refs, nullptr, emb);
  CHECK(same.bleu4 == doctest::Approx(100.0));
  CHECK(same.rouge_l == doctest::Approx(100.0));
  CHECK(same.f1_findings == doctest::Approx(100.0));
  CHECK(same.f1_graph == doctest::Approx(100.0));

  const auto back = metric_report_from_json(to_json(rep));
  CHECK(back.bleu4 == rep.bleu4);
  CHECK(back.f1_graph == rep.f1_graph);
}
