#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"

#include "chexofa/errors.hpp"
#include "chexofa/model.hpp"
#include "chexofa/synthcxr.hpp"
#include "chexofa/tokenizer.hpp"

using namespace cxo;

namespace {

ModelConfig default_config(int vocab = 64) {
  ModelConfig c;
  c.vocab_size = vocab;
  return c;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.d = 8;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.ffn_mult = 2;
  c.vocab_size = 12;
  c.max_text_len = 8;
  c.image_size = 8;
  c.patch_rows = 1;
  c.patch_cols = 2;
  c.conv_channels = 2;
  c.dropout = 0.0;
  return c;
}

Image noise_image(int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, 255);
  Image img(size, size);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(u(rng));
  return img;
}

std::vector<int> random_ids(std::size_t n, int vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(kNumSpecial, vocab - 1);
  std::vector<int> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Receptive field of patch index p along one axis at the default geometry:
// two stride-2 3x3 convolutions with edge replication, 2 cells per patch.
std::pair<int, int> pixel_range(int p) { return {std::max(0, 8 * p - 3), std::min(63, 8 * p + 7)}; }

}  // namespace

TEST_CASE("parameter layout and count") {
  const auto c = default_config(600);
  const auto a = ModelParams::init(c, 0);
  const auto b = ModelParams::init(c, 0);
  CHECK(a.scalar_count() == 1087920);
  CHECK(a.scalar_count() == b.scalar_count());
  std::set<std::string> names;
  for (const auto& [n, t] : a.named()) CHECK(names.insert(n).second);
  CHECK(a.get("enc.0.ln1.g").matrix() == Matrix::Ones(1, 128));
  CHECK(a.get("enc.0.attn.bq").matrix() == Matrix::Zero(1, 128));
  CHECK(std::abs(a.get("tok_emb").matrix().mean()) < 1e-3);

  auto named = a.named();
  named.pop_back();
  CHECK_THROWS_AS(ModelParams::from_named(c, named), FormatError);
  ModelConfig bad = c;
  bad.heads = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("embed_image shape, symmetry and receptive fields") {
  const auto c = default_config();
  std::mt19937_64 rng(0);
  auto params = ModelParams::init(c, 0);
  for (auto& [name, t] : params.named()) {
    if (name.starts_with("conv") || name.starts_with("patch_proj")) {
      for (Eigen::Index i = 0; i < t.matrix().size(); ++i) t.matrix().data()[i] = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    }
  }
  const Model model(c, params);
  const Tensor zero = model.embed_image(Image(64, 64, 0));
  REQUIRE(zero.shape() == Shape{64, 128});
  for (Eigen::Index r = 1; r < 64; ++r) CHECK(zero.matrix().row(r) == zero.matrix().row(0));

  Image base = noise_image(64, 3);
  Image a = base, b = base;
  a.at(3, 4) = 255;
  b.at(60, 59) = 255;
  base.at(3, 4) = 0;
  a.at(60, 59) = 0;
  b.at(3, 4) = 0;
  const Matrix fa = model.embed_image(a).matrix();
  const Matrix fb = model.embed_image(b).matrix();
  auto covers = [](int patch, int y, int x) {
    const auto [r0, r1] = pixel_range(patch / 8);
    const auto [c0, c1] = pixel_range(patch % 8);
    return y >= r0 && y <= r1 && x >= c0 && x <= c1;
  };
  int changed = 0;
  for (int p = 0; p < 64; ++p) {
    const bool affected = covers(p, 3, 4) || covers(p, 60, 59);
    if (!affected) CHECK(fa.row(p) == fb.row(p));
    changed += fa.row(p) != fb.row(p);
  }
  CHECK(fa.row(0) != fb.row(0));
  CHECK(fa.row(63) != fb.row(63));
  CHECK(changed <= 8);

  CHECK_THROWS_AS(model.embed_image(Image(32, 32)), ShapeError);
}

TEST_CASE("fuse lengths, order and locality") {
  const auto c = default_config();
  const Model model(c, ModelParams::init(c, 1));
  std::mt19937_64 rng(1);
  EncoderInput in;
  in.instruction_ids = random_ids(7, c.vocab_size, rng);
  in.text_ids = random_ids(12, c.vocab_size, rng);
  CHECK(model.fuse(in).shape() == Shape{7 + 1 + 12, 128});
  EncoderInput vis = in;
  vis.text_ids.clear();
  vis.image = noise_image(64, 1);
  CHECK(model.fuse(vis).shape() == Shape{7 + 1 + 64, 128});
  EncoderInput both = in;
  both.image = noise_image(64, 1);
  const Tensor fb = model.fuse(both);
  CHECK(fb.shape() == Shape{7 + 1 + 12 + 64, 128});
  // Visual rows are the trailing block and match the text-free input's.
  CHECK(fb.matrix().bottomRows(64) == model.fuse(vis).matrix().bottomRows(64));

  EncoderInput swapped = in;
  std::swap(swapped.text_ids[2], swapped.text_ids[5]);
  REQUIRE(swapped.text_ids[2] != swapped.text_ids[5]);
  const Matrix f0 = model.fuse(in).matrix();
  const Matrix f1 = model.fuse(swapped).matrix();
  for (Eigen::Index r = 0; r < f0.rows(); ++r) {
    const bool expect_change = r == 8 + 2 || r == 8 + 5;
    CHECK((f0.row(r) != f1.row(r)) == expect_change);
  }

  EncoderInput longer = both;
  longer.text_ids = random_ids(400, c.vocab_size, rng);
  const Tensor ft = model.fuse(longer);
  CHECK(ft.shape() == Shape{static_cast<std::size_t>(c.max_text_len + 64), 128});
  CHECK(fused_text_ids(longer, c.max_text_len).back() == longer.text_ids[c.max_text_len - 9]);

  EncoderInput empty;
  empty.instruction_ids = in.instruction_ids;
  CHECK_THROWS_AS(model.fuse(empty), ContractError);
}

TEST_CASE("decoder causality, finiteness and incremental agreement") {
  const auto c = default_config();
  for (std::uint64_t seed : {0, 1, 2}) {
    CAPTURE(seed);
    const Model model(c, ModelParams::init(c, seed));
    std::mt19937_64 rng(seed);
    EncoderInput in;
    in.instruction_ids = random_ids(6, c.vocab_size, rng);
    in.text_ids = random_ids(10, c.vocab_size, rng);
    in.image = noise_image(64, seed);
    const Memory mem = model.encode(in);
    std::vector<int> y = random_ids(9, c.vocab_size, rng);
    y[0] = kBosId;
    const Matrix logits = model.decode(mem, y).matrix();
    CHECK(logits.rows() == 9);
    CHECK(logits.cols() == c.vocab_size);
    CHECK(logits.allFinite());

    for (std::size_t t = 1; t < y.size(); ++t) {
      auto z = y;
      z[t] = z[t] == 5 ? 6 : 5;
      const Matrix other = model.decode(mem, z).matrix();
      CHECK(other.topRows(static_cast<Eigen::Index>(t)) == logits.topRows(static_cast<Eigen::Index>(t)));
      CHECK(other.row(static_cast<Eigen::Index>(t)) != logits.row(static_cast<Eigen::Index>(t)));
    }
    for (std::size_t t = 1; t <= y.size(); ++t) {
      const auto step = model.decode_step(mem, std::span(y).first(t));
      CHECK((step - logits.row(static_cast<Eigen::Index>(t) - 1)).cwiseAbs().maxCoeff() <= 1e-12);
    }
    CHECK(model.decode(mem, y).matrix() == logits);
  }
}

TEST_CASE("cached incremental decoder follows reordered hypotheses") {
  const auto c = default_config();
  for (std::uint64_t seed : {0, 1}) {
    CAPTURE(seed);
    const Model model(c, ModelParams::init(c, seed));
    std::mt19937_64 rng(seed + 10);
    EncoderInput in;
    in.instruction_ids = random_ids(5, c.vocab_size, rng);
    in.text_ids = random_ids(8, c.vocab_size, rng);
    in.text_ids[3] = kPadId;  // masked key inside the memory
    if (seed == 0) in.image = noise_image(64, seed);
    const Memory mem = model.encode(in);

    IncrementalDecoder dec(model, mem);
    std::vector<std::vector<int>> hyps(3, std::vector<int>{kBosId});
    Matrix logits = dec.start(3);
    std::uniform_int_distribution<int> pick(0, 2);
    for (int t = 0; t < 7; ++t) {
      for (std::size_t i = 0; i < hyps.size(); ++i) {
        const Matrix full = model.decode(mem, hyps[i]).matrix();
        CHECK((logits.row(static_cast<Eigen::Index>(i)) - full.bottomRows(1)).cwiseAbs().maxCoeff() <= 1e-12);
      }
      std::vector<int> parents, tokens;
      std::vector<std::vector<int>> next;
      const int n = 1 + pick(rng);
      for (int i = 0; i < n; ++i) {
        parents.push_back(pick(rng) % static_cast<int>(hyps.size()));
        tokens.push_back(random_ids(1, c.vocab_size, rng)[0]);
        next.push_back(hyps[static_cast<std::size_t>(parents.back())]);
        next.back().push_back(tokens.back());
      }
      hyps = next;
      logits = dec.step(parents, tokens);
      CHECK(dec.length() == t + 2);
    }
  }
  const Model model(c, ModelParams::init(c, 0));
  EncoderInput in;
  in.instruction_ids = {7, 8};
  in.text_ids = {9};
  const Memory mem = model.encode(in);
  IncrementalDecoder dec(model, mem);
  const int one[] = {0};
  const int tok[] = {9};
  CHECK_THROWS_AS(dec.step(one, tok), ContractError);
  dec.start(1);
  const int bad[] = {1};
  CHECK_THROWS_AS(dec.step(bad, tok), IndexError);
}

TEST_CASE("decoder input contract") {
  const auto c = default_config();
  const Model model(c, ModelParams::init(c, 0));
  EncoderInput in;
  in.instruction_ids = {5, 6};
  in.text_ids = {7};
  const auto mem = model.encode(in);
  CHECK_THROWS_AS(model.decode(mem, std::vector<int>{5, 6}), ContractError);
  CHECK_THROWS_AS(model.decode(mem, std::vector<int>(300, kBosId)), ContractError);
  CHECK_THROWS_AS(model.decode(mem, std::vector<int>{kBosId, 64}), IndexError);
}

TEST_CASE("padding invariance") {
  const auto c = default_config();
  const Model model(c, ModelParams::init(c, 2));
  std::mt19937_64 rng(2);
  EncoderInput in;
  in.instruction_ids = random_ids(5, c.vocab_size, rng);
  in.text_ids = random_ids(11, c.vocab_size, rng);
  in.image = noise_image(64, 2);
  EncoderInput padded = in;
  padded.text_ids.insert(padded.text_ids.end(), 6, kPadId);
  const Matrix a = model.encode(in).states;
  const Matrix b = model.encode(padded).states;
  const Eigen::Index text_rows = 5 + 1 + 11;
  CHECK((a.topRows(text_rows) - b.topRows(text_rows)).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK((a.bottomRows(64) - b.bottomRows(64)).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("batched forward equals per-item forward") {
  const auto c = default_config();
  const auto params = ModelParams::init(c, 4);
  const Model model(c, params);
  std::mt19937_64 rng(4);
  std::vector<EncoderInput> batch(3);
  std::vector<std::vector<int>> ys;
  for (int i = 0; i < 3; ++i) {
    batch[i].instruction_ids = random_ids(4, c.vocab_size, rng);
    batch[i].text_ids = random_ids(static_cast<std::size_t>(3 + 4 * i), c.vocab_size, rng);
    if (i != 1) batch[i].image = noise_image(64, static_cast<std::uint64_t>(i));
    auto y = random_ids(static_cast<std::size_t>(2 + i), c.vocab_size, rng);
    y[0] = kBosId;
    ys.push_back(y);
  }
  Tape tape(GradMode::kDisabled);
  ForwardPass fp(c, params, tape, Mode::kEval);
  const auto mem = fp.encode(fp.fuse(batch));
  const std::vector<std::size_t> idx = {0, 1, 2};
  const Matrix logits = fp.logits(fp.decode_hidden(mem, ys, idx)).value();
  Eigen::Index row = 0;
  for (int i = 0; i < 3; ++i) {
    const Matrix single = model.decode(model.encode(batch[i]), ys[i]).matrix();
    CHECK((logits.middleRows(row, single.rows()) - single).cwiseAbs().maxCoeff() <= 1e-12);
    row += single.rows();
  }
}

TEST_CASE("full model gradients match finite differences") {
  for (std::uint64_t seed : {5, 6}) {
    const auto err = cxo::testing::model_gradient_error(tiny_config(), seed);
    CAPTURE(err.param);
    CHECK(err.worst < 1e-4);
    CHECK(err.vanishing_numeric < 1e-8);
  }
}

TEST_CASE("eval mode is deterministic, train mode applies dropout") {
  const auto c = default_config();
  const auto params = ModelParams::init(c, 6);
  EncoderInput in;
  in.instruction_ids = {5, 6, 7};
  in.text_ids = {8, 9};
  in.image = noise_image(64, 6);
  const std::vector<std::vector<int>> dec = {{kBosId, 10, 11}};
  const std::vector<std::size_t> idx = {0};
  auto run = [&](Mode mode, std::uint64_t seed) {
    Tape tape(GradMode::kDisabled);
    ForwardPass fp(c, params, tape, mode, seed);
    return Matrix(fp.logits(fp.decode_hidden(fp.encode(fp.fuse(std::span(&in, 1))), dec, idx)).value());
  };
  CHECK(run(Mode::kEval, 1) == run(Mode::kEval, 2));
  CHECK(run(Mode::kTrain, 1) == run(Mode::kTrain, 1));
  CHECK(run(Mode::kTrain, 1) != run(Mode::kTrain, 2));
}
