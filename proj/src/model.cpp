#include "chexofa/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "chexofa/errors.hpp"
#include "chexofa/tokenizer.hpp"

namespace cxo {

namespace {

enum TypeId { kTypeInstruction = 0, kTypeText = 1, kTypeVisual = 2 };

using IndexTable = std::shared_ptr<const std::vector<std::int64_t>>;

// Replicate-padded stride-2 3x3 im2col over n stacked (h x w x c) maps.
// Output row (b, i, j), column (ky, kx, ch).
IndexTable conv_index(int n, int h, int w, int c) {
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  const int ho = h / 2;
  const int wo = w / 2;
  idx->reserve(static_cast<std::size_t>(n) * ho * wo * 9 * c);
  for (int b = 0; b < n; ++b) {
    for (int i = 0; i < ho; ++i) {
      for (int j = 0; j < wo; ++j) {
        for (int ky = 0; ky < 3; ++ky) {
          for (int kx = 0; kx < 3; ++kx) {
            const int r = std::clamp(2 * i + ky - 1, 0, h - 1);
            const int s = std::clamp(2 * j + kx - 1, 0, w - 1);
            for (int ch = 0; ch < c; ++ch) {
              idx->push_back((static_cast<std::int64_t>(b) * h * w + static_cast<std::int64_t>(r) * w + s) * c + ch);
            }
          }
        }
      }
    }
  }
  return idx;
}

// 2x2 stride-2 window gather; columns (dy, dx, ch).
IndexTable pool_index(int n, int h, int w, int c) {
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  for (int b = 0; b < n; ++b) {
    for (int i = 0; i < h / 2; ++i) {
      for (int j = 0; j < w / 2; ++j) {
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            for (int ch = 0; ch < c; ++ch) {
              idx->push_back((static_cast<std::int64_t>(b) * h * w + static_cast<std::int64_t>(2 * i + dy) * w + 2 * j + dx) * c + ch);
            }
          }
        }
      }
    }
  }
  return idx;
}

// Patch flattening of n stacked (m x m x c) maps into a pr x pc grid.
IndexTable patch_index(int n, int m, int pr, int pc, int c) {
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  const int ch_rows = m / pr;
  const int ch_cols = m / pc;
  for (int b = 0; b < n; ++b) {
    for (int p = 0; p < pr; ++p) {
      for (int q = 0; q < pc; ++q) {
        for (int y = 0; y < ch_rows; ++y) {
          for (int x = 0; x < ch_cols; ++x) {
            for (int ch = 0; ch < c; ++ch) {
              const std::int64_t r = p * ch_rows + y;
              const std::int64_t s = q * ch_cols + x;
              idx->push_back((static_cast<std::int64_t>(b) * m * m + r * m + s) * c + ch);
            }
          }
        }
      }
    }
  }
  return idx;
}

}  // namespace

int ModelConfig::patch_features() const {
  const int m = feature_map_size();
  return (m / patch_rows) * (m / patch_cols) * conv_channels;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (d < 1 || heads < 1 || d % heads != 0) fail("d must be a positive multiple of heads");
  if (enc_layers < 1 || dec_layers < 1) fail("layer counts must be >= 1");
  if (ffn_mult < 1) fail("ffn_mult must be >= 1");
  if (vocab_size <= kNumSpecial) fail("vocab_size must exceed the special tokens");
  if (max_text_len < 2) fail("max_text_len must be >= 2");
  if (image_size < 4 || image_size % 4 != 0) fail("image_size must be a positive multiple of 4");
  if (patch_rows < 1 || patch_cols < 1 || feature_map_size() % patch_rows != 0 || feature_map_size() % patch_cols != 0) {
    fail("patch grid must divide the feature map");
  }
  if (conv_channels < 1) fail("conv_channels must be >= 1");
  if (!(dropout >= 0 && dropout < 1)) fail("dropout must be in [0, 1)");
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d);
  const auto ch = static_cast<std::size_t>(c.conv_channels);
  const auto f = d * static_cast<std::size_t>(c.ffn_mult);
  std::vector<std::pair<std::string, Shape>> out = {
      {"tok_emb", {static_cast<std::size_t>(c.vocab_size), d}},
      {"text_pos", {static_cast<std::size_t>(c.max_text_len), d}},
      {"patch_pos", {static_cast<std::size_t>(c.num_patches()), d}},
      {"dec_pos", {static_cast<std::size_t>(c.max_text_len), d}},
      {"type_emb", {3, d}},
      {"conv1.w", {9, ch}},
      {"conv1.b", {1, ch}},
      {"conv2.w", {9 * ch, ch}},
      {"conv2.b", {1, ch}},
      {"patch_proj.w", {static_cast<std::size_t>(c.patch_features()), d}},
      {"patch_proj.b", {1, d}},
  };
  auto ln = [&](const std::string& p) {
    out.push_back({p + ".g", {1, d}});
    out.push_back({p + ".b", {1, d}});
  };
  auto attn = [&](const std::string& p) {
    for (const char* m : {"q", "k", "v", "o"}) {
      out.push_back({p + ".w" + m, {d, d}});
      out.push_back({p + ".b" + m, {1, d}});
    }
  };
  auto ffn = [&](const std::string& p) {
    out.push_back({p + ".w1", {d, f}});
    out.push_back({p + ".b1", {1, f}});
    out.push_back({p + ".w2", {f, d}});
    out.push_back({p + ".b2", {1, d}});
  };
  for (int l = 0; l < c.enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    ln(p + ".ln1");
    attn(p + ".attn");
    ln(p + ".ln2");
    ffn(p + ".ffn");
  }
  ln("enc.ln_f");
  for (int l = 0; l < c.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    ln(p + ".ln1");
    attn(p + ".self");
    ln(p + ".ln2");
    attn(p + ".cross");
    ln(p + ".ln3");
    ffn(p + ".ffn");
  }
  ln("dec.ln_f");
  return out;
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  NamedTensors named;
  for (auto& [name, shape] : parameter_layout(config)) {
    Tensor t = Tensor::zeros(shape);
    const auto dot = name.rfind('.');
    const std::string leafname = dot == std::string::npos ? name : name.substr(dot + 1);
    const bool is_gain = leafname == "g";
    const bool is_bias = dot != std::string::npos && leafname.front() == 'b';
    if (is_gain) {
      t.matrix().setOnes();
    } else if (!is_bias) {
      for (Eigen::Index i = 0; i < t.matrix().size(); ++i) t.matrix().data()[i] = normal(rng);
    }
    named.emplace_back(name, std::move(t));
  }
  return from_named(config, std::move(named));
}

ModelParams ModelParams::from_named(const ModelConfig& config, NamedTensors named) {
  const auto layout = parameter_layout(config);
  if (named.size() != layout.size()) {
    throw FormatError("parameters: expected " + std::to_string(layout.size()) + " tensors, got " + std::to_string(named.size()));
  }
  ModelParams p;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (named[i].first != layout[i].first) {
      throw FormatError("parameters: expected '" + layout[i].first + "' at position " + std::to_string(i) + ", got '" +
                        named[i].first + "'");
    }
    if (named[i].second.shape() != layout[i].second) {
      throw ShapeError("parameters: '" + layout[i].first + "' has shape " + shape_string(named[i].second.shape()) +
                       ", expected " + shape_string(layout[i].second));
    }
    p.index_.emplace(layout[i].first, i);
  }
  p.named_ = std::move(named);
  return p;
}

std::size_t ModelParams::index_of(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw IndexError("unknown parameter '" + std::string(name) + "'");
  return it->second;
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : named_) n += t.size();
  return n;
}

std::vector<int> fused_text_ids(const EncoderInput& input, int max_text_len) {
  const auto head = input.instruction_ids.size() + 1;
  if (static_cast<int>(head) > max_text_len) {
    throw ContractError("fuse: instruction of " + std::to_string(input.instruction_ids.size()) +
                        " tokens does not fit max_text_len " + std::to_string(max_text_len));
  }
  std::vector<int> ids = input.instruction_ids;
  ids.push_back(kSepId);
  const auto room = static_cast<std::size_t>(max_text_len) - head;
  const auto keep = std::min(room, input.text_ids.size());
  ids.insert(ids.end(), input.text_ids.begin(), input.text_ids.begin() + static_cast<std::ptrdiff_t>(keep));
  return ids;
}

// ---------------------------------------------------------------------------

ForwardPass::ForwardPass(const ModelConfig& config, const ModelParams& params, Tape& tape, Mode mode,
                         std::uint64_t dropout_seed)
    : config_(config), params_(params), tape_(tape), mode_(mode), rng_(dropout_seed) {
  vars_.reserve(params.named().size());
  for (const auto& [_, t] : params.named()) vars_.push_back(tape_.leaf(t.matrix(), true));
}

Var ForwardPass::param(std::string_view name) const { return vars_[params_.index_of(name)]; }

Var ForwardPass::linear(const Var& x, const std::string& prefix) {
  return add(matmul(x, param(prefix + ".w")), param(prefix + ".b"));
}

Var ForwardPass::maybe_dropout(const Var& x) {
  if (mode_ != Mode::kTrain || config_.dropout <= 0) return x;
  return dropout(x, config_.dropout, rng_);
}

Var ForwardPass::embed_images(std::span<const Image* const> images) {
  const int n = static_cast<int>(images.size());
  if (n == 0) throw ContractError("embed_images: no images");
  const int s = config_.image_size;
  const int c = config_.conv_channels;
  Matrix pixels(static_cast<Eigen::Index>(n) * s * s, 1);
  for (int b = 0; b < n; ++b) {
    const Image& img = *images[static_cast<std::size_t>(b)];
    if (img.rows != s || img.cols != s || img.pixels.size() != static_cast<std::size_t>(s * s)) {
      throw ShapeError("embed_image: expected " + std::to_string(s) + "x" + std::to_string(s) + " image, got " +
                       std::to_string(img.rows) + "x" + std::to_string(img.cols));
    }
    for (int i = 0; i < s * s; ++i) pixels(static_cast<Eigen::Index>(b) * s * s + i, 0) = img.pixels[static_cast<std::size_t>(i)] / 255.0;
  }
  const int h1 = s / 2;
  const int m = s / 4;
  Var x0 = tape_.leaf(std::move(pixels));
  Var cols1 = gather(x0, conv_index(n, s, s, 1), static_cast<Eigen::Index>(n) * h1 * h1, 9);
  Var a1 = gelu(add(matmul(cols1, param("conv1.w")), param("conv1.b")));
  Var cols2 = gather(a1, conv_index(n, h1, h1, c), static_cast<Eigen::Index>(n) * m * m, 9 * c);
  Var z2 = add(matmul(cols2, param("conv2.w")), param("conv2.b"));
  Matrix avg = Matrix::Zero(4 * c, c);
  for (int k = 0; k < 4; ++k) {
    for (int ch = 0; ch < c; ++ch) avg(k * c + ch, ch) = 0.25;
  }
  Var pooled = matmul(gather(a1, pool_index(n, h1, h1, c), static_cast<Eigen::Index>(n) * m * m, 4 * c), tape_.leaf(std::move(avg)));
  Var a2 = gelu(add(z2, pooled));
  Var patches = gather(a2, patch_index(n, m, config_.patch_rows, config_.patch_cols, c),
                       static_cast<Eigen::Index>(n) * config_.num_patches(), config_.patch_features());
  return linear(patches, "patch_proj");
}

PackedSequence ForwardPass::fuse(std::span<const EncoderInput> inputs) {
  if (inputs.empty()) throw ContractError("fuse: empty batch");
  const int np = config_.num_patches();
  std::vector<int> tok, pos, type;
  std::vector<const Image*> images;
  std::vector<Eigen::Index> text_len(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& in = inputs[i];
    if (in.text_ids.empty() && !in.image) throw ContractError("fuse: input has neither text nor image");
    const auto ids = fused_text_ids(in, config_.max_text_len);
    for (std::size_t t = 0; t < ids.size(); ++t) {
      if (ids[t] < 0 || ids[t] >= config_.vocab_size) throw IndexError("fuse: token id " + std::to_string(ids[t]) + " outside vocabulary");
      tok.push_back(ids[t]);
      pos.push_back(static_cast<int>(t));
      type.push_back(t <= in.instruction_ids.size() ? kTypeInstruction : kTypeText);
    }
    text_len[i] = static_cast<Eigen::Index>(ids.size());
    if (in.image) images.push_back(&*in.image);
  }
  Var text = add(add(embedding_lookup(param("tok_emb"), tok), embedding_lookup(param("text_pos"), pos)),
                 embedding_lookup(param("type_emb"), type));
  const Eigen::Index text_rows = text.rows();
  Var all = text;
  if (!images.empty()) {
    std::vector<int> ppos, ptype(images.size() * static_cast<std::size_t>(np), kTypeVisual);
    for (std::size_t b = 0; b < images.size(); ++b) {
      for (int p = 0; p < np; ++p) ppos.push_back(p);
    }
    Var vis = add(add(embed_images(images), embedding_lookup(param("patch_pos"), ppos)), embedding_lookup(param("type_emb"), ptype));
    all = concat(std::vector<Var>{text, vis});
  }

  PackedSequence out;
  std::vector<int> order;
  Eigen::Index text_cursor = 0;
  Eigen::Index vis_cursor = text_rows;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    out.offset.push_back(static_cast<Eigen::Index>(order.size()));
    const auto ids = fused_text_ids(inputs[i], config_.max_text_len);
    for (Eigen::Index t = 0; t < text_len[i]; ++t) {
      order.push_back(static_cast<int>(text_cursor + t));
      out.key_valid.push_back(ids[static_cast<std::size_t>(t)] != kPadId);
    }
    text_cursor += text_len[i];
    if (inputs[i].image) {
      for (int p = 0; p < np; ++p) {
        order.push_back(static_cast<int>(vis_cursor + p));
        out.key_valid.push_back(1);
      }
      vis_cursor += np;
    }
    out.length.push_back(static_cast<Eigen::Index>(order.size()) - out.offset.back());
  }
  out.states = maybe_dropout(images.empty() ? all : embedding_lookup(all, order));
  return out;
}

Var ForwardPass::self_attention_block(const Var& x, const std::string& prefix, std::shared_ptr<const AttentionLayout> layout) {
  Var h = layer_norm(x, param(prefix + ".ln1.g"), param(prefix + ".ln1.b"));
  const std::string a = prefix + (layout->causal ? ".self" : ".attn");
  Var q = add(matmul(h, param(a + ".wq")), param(a + ".bq"));
  Var k = add(matmul(h, param(a + ".wk")), param(a + ".bk"));
  Var v = add(matmul(h, param(a + ".wv")), param(a + ".bv"));
  Var o = add(matmul(attention(q, k, v, config_.heads, std::move(layout)), param(a + ".wo")), param(a + ".bo"));
  return add(x, maybe_dropout(o));
}

Var ForwardPass::ffn_block(const Var& x, const std::string& prefix) {
  Var u = gelu(add(matmul(x, param(prefix + ".w1")), param(prefix + ".b1")));
  return add(matmul(u, param(prefix + ".w2")), param(prefix + ".b2"));
}

PackedSequence ForwardPass::encode(const PackedSequence& fused) {
  auto layout = std::make_shared<AttentionLayout>();
  for (std::size_t i = 0; i < fused.offset.size(); ++i) {
    layout->segments.push_back({fused.offset[i], fused.length[i], fused.offset[i], fused.length[i]});
  }
  layout->key_valid = fused.key_valid;
  std::shared_ptr<const AttentionLayout> shared = layout;
  Var x = fused.states;
  for (int l = 0; l < config_.enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    x = self_attention_block(x, p, shared);
    Var h = layer_norm(x, param(p + ".ln2.g"), param(p + ".ln2.b"));
    x = add(x, maybe_dropout(ffn_block(h, p + ".ffn")));
  }
  PackedSequence out = fused;
  out.states = layer_norm(x, param("enc.ln_f.g"), param("enc.ln_f.b"));
  return out;
}

Var ForwardPass::decode_hidden(const PackedSequence& memory, std::span<const std::vector<int>> decoder_inputs,
                               std::span<const std::size_t> memory_index) {
  if (decoder_inputs.empty()) throw ContractError("decode: empty batch");
  if (memory_index.size() != decoder_inputs.size()) throw ShapeError("decode: memory_index length differs from batch");
  std::vector<int> tok, pos;
  auto self_layout = std::make_shared<AttentionLayout>();
  self_layout->causal = true;
  auto cross_layout = std::make_shared<AttentionLayout>();
  cross_layout->key_valid = memory.key_valid;
  for (std::size_t j = 0; j < decoder_inputs.size(); ++j) {
    const auto& ids = decoder_inputs[j];
    if (ids.empty() || ids.front() != kBosId) throw ContractError("decode: decoder input must begin with BOS");
    if (static_cast<int>(ids.size()) > config_.max_text_len) {
      throw ContractError("decode: length " + std::to_string(ids.size()) + " exceeds max_text_len " +
                          std::to_string(config_.max_text_len));
    }
    if (memory_index[j] >= memory.offset.size()) throw IndexError("decode: memory index out of range");
    const auto begin = static_cast<Eigen::Index>(tok.size());
    const auto len = static_cast<Eigen::Index>(ids.size());
    for (std::size_t t = 0; t < ids.size(); ++t) {
      if (ids[t] < 0 || ids[t] >= config_.vocab_size) throw IndexError("decode: token id " + std::to_string(ids[t]) + " outside vocabulary");
      tok.push_back(ids[t]);
      pos.push_back(static_cast<int>(t));
    }
    self_layout->segments.push_back({begin, len, begin, len});
    const auto m = memory_index[j];
    cross_layout->segments.push_back({begin, len, memory.offset[m], memory.length[m]});
  }
  std::shared_ptr<const AttentionLayout> self_shared = self_layout;
  std::shared_ptr<const AttentionLayout> cross_shared = cross_layout;

  Var x = maybe_dropout(add(embedding_lookup(param("tok_emb"), tok), embedding_lookup(param("dec_pos"), pos)));
  for (int l = 0; l < config_.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    x = self_attention_block(x, p, self_shared);
    Var h = layer_norm(x, param(p + ".ln2.g"), param(p + ".ln2.b"));
    const std::string c = p + ".cross";
    Var q = add(matmul(h, param(c + ".wq")), param(c + ".bq"));
    Var k = add(matmul(memory.states, param(c + ".wk")), param(c + ".bk"));
    Var v = add(matmul(memory.states, param(c + ".wv")), param(c + ".bv"));
    Var o = add(matmul(attention(q, k, v, config_.heads, cross_shared), param(c + ".wo")), param(c + ".bo"));
    x = add(x, maybe_dropout(o));
    h = layer_norm(x, param(p + ".ln3.g"), param(p + ".ln3.b"));
    x = add(x, maybe_dropout(ffn_block(h, p + ".ffn")));
  }
  return layer_norm(x, param("dec.ln_f.g"), param("dec.ln_f.b"));
}

Var ForwardPass::logits(const Var& hidden) { return matmul(hidden, transpose(param("tok_emb"))); }

// ---------------------------------------------------------------------------

Model::Model(ModelConfig config, ModelParams params) : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  ModelParams::from_named(config_, params_.named());  // shape check
}

Tensor Model::embed_image(const Image& image) const {
  Tape tape(GradMode::kDisabled);
  ForwardPass fp(config_, params_, tape, Mode::kEval);
  const Image* one[] = {&image};
  return Tensor(fp.embed_images(one).value());
}

Tensor Model::fuse(const EncoderInput& input) const {
  Tape tape(GradMode::kDisabled);
  ForwardPass fp(config_, params_, tape, Mode::kEval);
  return Tensor(fp.fuse(std::span(&input, 1)).states.value());
}

Memory Model::encode(const EncoderInput& input) const {
  Tape tape(GradMode::kDisabled);
  ForwardPass fp(config_, params_, tape, Mode::kEval);
  auto enc = fp.encode(fp.fuse(std::span(&input, 1)));
  return Memory{enc.states.value(), enc.key_valid};
}

Tensor Model::decode(const Memory& memory, std::span<const int> decoder_input) const {
  if (static_cast<std::size_t>(memory.states.rows()) != memory.key_valid.size() || memory.states.cols() != config_.d) {
    throw ShapeError("decode: memory does not match config");
  }
  Tape tape(GradMode::kDisabled);
  ForwardPass fp(config_, params_, tape, Mode::kEval);
  PackedSequence mem{tape.leaf(memory.states), {0}, {memory.states.rows()}, memory.key_valid};
  const std::vector<std::vector<int>> in = {std::vector<int>(decoder_input.begin(), decoder_input.end())};
  const std::size_t idx[] = {0};
  return Tensor(fp.logits(fp.decode_hidden(mem, in, idx)).value());
}

Eigen::RowVectorXd Model::decode_step(const Memory& memory, std::span<const int> prefix) const {
  const Tensor all = decode(memory, prefix);
  return all.matrix().row(all.matrix().rows() - 1);
}


// ---------------------------------------------------------------------------

namespace {

Matrix affine_rows(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y(x.rows(), w.cols());
  y.noalias() = x * w;
  y.rowwise() += b.row(0);
  return y;
}

Matrix layer_norm_rows(const Matrix& x, const Matrix& g, const Matrix& b) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    auto centered = x.row(r).array() - mu;
    const double var = centered.square().mean();
    y.row(r) = centered * (1.0 / std::sqrt(var + kLayerNormEps));
  }
  return (y.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
}

Matrix gelu_rows(const Matrix& x) {
  const auto v = x.array();
  const Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t =
      detail::fast_tanh(detail::kGeluK * (v + detail::kGeluC * v.cube()));
  return (0.5 * v * (1.0 + t)).matrix();
}

// One query row against key rows [0, n) of K/V; `valid` may be empty.
void attend_one(const Eigen::Ref<const Eigen::RowVectorXd>& q, const Matrix& K, const Matrix& V, Eigen::Index n,
                const std::vector<unsigned char>& valid, int heads, Eigen::Ref<Eigen::RowVectorXd> out) {
  const Eigen::Index dh = q.size() / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    Eigen::RowVectorXd s(n);
    s.noalias() = q.segment(h * dh, dh) * K.block(0, h * dh, n, dh).transpose();
    s *= sc;
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!valid.empty() && !valid[static_cast<std::size_t>(j)]) {
        s(j) = -std::numeric_limits<double>::infinity();
      } else {
        m = std::max(m, s(j));
      }
    }
    if (m == -std::numeric_limits<double>::infinity()) {
      out.segment(h * dh, dh).setZero();
      continue;
    }
    Eigen::RowVectorXd e = (s.array() - m).exp();
    e /= e.sum();
    out.segment(h * dh, dh).noalias() = e * V.block(0, h * dh, n, dh);
  }
}

}  // namespace

IncrementalDecoder::IncrementalDecoder(const Model& model, const Memory& memory)
    : model_(model), key_valid_(memory.key_valid) {
  const auto& cfg = model.config();
  if (static_cast<std::size_t>(memory.states.rows()) != memory.key_valid.size() || memory.states.cols() != cfg.d) {
    throw ShapeError("decode: memory does not match config");
  }
  const auto& p = model.params();
  auto m = [&p](const std::string& name) { return &p.get(name).matrix(); };
  auto att = [&m](const std::string& prefix, char c) {
    return Affine{m(prefix + ".w" + c), m(prefix + ".b" + c)};
  };
  for (int l = 0; l < cfg.dec_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    LayerWeights w;
    w.ln1 = {m(pre + ".ln1.g"), m(pre + ".ln1.b")};
    w.ln2 = {m(pre + ".ln2.g"), m(pre + ".ln2.b")};
    w.ln3 = {m(pre + ".ln3.g"), m(pre + ".ln3.b")};
    w.q = att(pre + ".self", 'q');
    w.k = att(pre + ".self", 'k');
    w.v = att(pre + ".self", 'v');
    w.o = att(pre + ".self", 'o');
    w.cq = att(pre + ".cross", 'q');
    w.co = att(pre + ".cross", 'o');
    w.ffn1 = {m(pre + ".ffn.w1"), m(pre + ".ffn.b1")};
    w.ffn2 = {m(pre + ".ffn.w2"), m(pre + ".ffn.b2")};
    w.cross_k = affine_rows(memory.states, *att(pre + ".cross", 'k').w, *att(pre + ".cross", 'k').b);
    w.cross_v = affine_rows(memory.states, *att(pre + ".cross", 'v').w, *att(pre + ".cross", 'v').b);
    layers_.push_back(std::move(w));
  }
}

Matrix IncrementalDecoder::start(int n) {
  if (n < 1) throw ContractError("decode: need at least one hypothesis");
  hyps_ = n;
  length_ = 0;
  const auto layers = static_cast<std::size_t>(model_.config().dec_layers);
  keys_.assign(static_cast<std::size_t>(n), std::vector<Matrix>(layers));
  values_.assign(static_cast<std::size_t>(n), std::vector<Matrix>(layers));
  const std::vector<int> bos(static_cast<std::size_t>(n), kBosId);
  return advance(bos);
}

Matrix IncrementalDecoder::step(std::span<const int> parents, std::span<const int> tokens) {
  if (length_ == 0) throw ContractError("decode: step before start");
  if (parents.size() != tokens.size() || parents.empty()) throw ShapeError("decode: parents and tokens differ in length");
  std::vector<std::vector<Matrix>> k, v;
  for (int parent : parents) {
    if (parent < 0 || parent >= hyps_) throw IndexError("decode: parent " + std::to_string(parent) + " out of range");
    k.push_back(keys_[static_cast<std::size_t>(parent)]);
    v.push_back(values_[static_cast<std::size_t>(parent)]);
  }
  keys_ = std::move(k);
  values_ = std::move(v);
  hyps_ = static_cast<int>(parents.size());
  return advance(tokens);
}

Matrix IncrementalDecoder::advance(std::span<const int> tokens) {
  const auto& cfg = model_.config();
  if (length_ >= cfg.max_text_len) {
    throw ContractError("decode: length " + std::to_string(length_ + 1) + " exceeds max_text_len " +
                        std::to_string(cfg.max_text_len));
  }
  const auto& p = model_.params();
  const Matrix& tok_emb = p.get("tok_emb").matrix();
  const Matrix& dec_pos = p.get("dec_pos").matrix();
  const auto n = static_cast<Eigen::Index>(tokens.size());
  Matrix x(n, cfg.d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int t = tokens[static_cast<std::size_t>(i)];
    if (t < 0 || t >= cfg.vocab_size) throw IndexError("decode: token id " + std::to_string(t) + " outside vocabulary");
    x.row(i) = tok_emb.row(t) + dec_pos.row(length_);
  }
  const std::vector<unsigned char> all_valid;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& w = layers_[l];
    Matrix h = layer_norm_rows(x, *w.ln1.g, *w.ln1.b);
    const Matrix q = affine_rows(h, *w.q.w, *w.q.b);
    const Matrix k = affine_rows(h, *w.k.w, *w.k.b);
    const Matrix v = affine_rows(h, *w.v.w, *w.v.b);
    Matrix att(n, cfg.d);
    for (Eigen::Index i = 0; i < n; ++i) {
      Matrix& K = keys_[static_cast<std::size_t>(i)][l];
      Matrix& V = values_[static_cast<std::size_t>(i)][l];
      K.conservativeResize(length_ + 1, cfg.d);
      V.conservativeResize(length_ + 1, cfg.d);
      K.row(length_) = k.row(i);
      V.row(length_) = v.row(i);
      attend_one(q.row(i), K, V, length_ + 1, all_valid, cfg.heads, att.row(i));
    }
    x += affine_rows(att, *w.o.w, *w.o.b);
    h = layer_norm_rows(x, *w.ln2.g, *w.ln2.b);
    const Matrix cq = affine_rows(h, *w.cq.w, *w.cq.b);
    for (Eigen::Index i = 0; i < n; ++i) {
      attend_one(cq.row(i), w.cross_k, w.cross_v, w.cross_k.rows(), key_valid_, cfg.heads, att.row(i));
    }
    x += affine_rows(att, *w.co.w, *w.co.b);
    h = layer_norm_rows(x, *w.ln3.g, *w.ln3.b);
    x += affine_rows(gelu_rows(affine_rows(h, *w.ffn1.w, *w.ffn1.b)), *w.ffn2.w, *w.ffn2.b);
  }
  ++length_;
  const Matrix hf = layer_norm_rows(x, p.get("dec.ln_f.g").matrix(), p.get("dec.ln_f.b").matrix());
  Matrix logits(n, cfg.vocab_size);
  logits.noalias() = hf * tok_emb.transpose();
  return logits;
}

}  // namespace cxo
