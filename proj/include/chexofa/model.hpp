#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "chexofa/checkpoint.hpp"
#include "chexofa/image.hpp"
#include "chexofa/ops.hpp"

namespace cxo {

struct ModelConfig {
  int d = 128;
  int enc_layers = 2;
  int dec_layers = 2;
  int heads = 4;
  int ffn_mult = 4;
  int vocab_size = 0;
  int max_text_len = 256;
  int patch_rows = 8;
  int patch_cols = 8;
  int image_size = 64;
  int conv_channels = 16;
  double dropout = 0.1;

  int num_patches() const { return patch_rows * patch_cols; }
  int max_encoder_len() const { return max_text_len + num_patches(); }
  int feature_map_size() const { return image_size / 4; }
  int patch_features() const;
  void validate() const;
};

/// Named trainable weights. Order is fixed by the config, so checkpoints and
/// optimizer state line up index by index.
class ModelParams {
 public:
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);
  static ModelParams from_named(const ModelConfig& config, NamedTensors named);

  const NamedTensors& named() const { return named_; }
  NamedTensors& named() { return named_; }
  std::size_t index_of(std::string_view name) const;
  const Tensor& get(std::string_view name) const { return named_[index_of(name)].second; }
  std::size_t scalar_count() const;

 private:
  NamedTensors named_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

/// Expected (name, shape) list for a config.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);

/// One encoder input x = (x^i, x^l, x^v). The image is turned into visual
/// features inside the forward pass so that gradients reach the extractor.
struct EncoderInput {
  std::vector<int> instruction_ids;
  std::vector<int> text_ids;
  std::optional<Image> image;
};

enum class Mode { kTrain, kEval };

/// Packed batch of variable-length sequences.
struct PackedSequence {
  Var states;
  std::vector<Eigen::Index> offset;
  std::vector<Eigen::Index> length;
  std::vector<unsigned char> key_valid;
};

/// Graph builder for one forward pass on a tape. Parameters become tape
/// leaves at construction; `grad_index` maps parameter index to node id.
class ForwardPass {
 public:
  ForwardPass(const ModelConfig& config, const ModelParams& params, Tape& tape, Mode mode,
              std::uint64_t dropout_seed = 0);

  const ModelConfig& config() const { return config_; }
  Tape& tape() { return tape_; }
  Var param(std::string_view name) const;
  const std::vector<Var>& param_vars() const { return vars_; }

  /// Visual features for each image, stacked: (n * |P|) x d.
  Var embed_images(std::span<const Image* const> images);

  /// Embedded encoder sequences, order [instruction][SEP][text][visual].
  PackedSequence fuse(std::span<const EncoderInput> inputs);
  PackedSequence encode(const PackedSequence& fused);

  /// Final decoder hidden states for each decoder input (each begins with
  /// BOS); sequence j attends to encoder item memory_index[j].
  Var decode_hidden(const PackedSequence& memory, std::span<const std::vector<int>> decoder_inputs,
                    std::span<const std::size_t> memory_index);
  Var logits(const Var& hidden);

 private:
  Var linear(const Var& x, const std::string& prefix);
  Var maybe_dropout(const Var& x);
  Var self_attention_block(const Var& x, const std::string& prefix, std::shared_ptr<const AttentionLayout> layout);
  Var ffn_block(const Var& x, const std::string& prefix);

  const ModelConfig& config_;
  const ModelParams& params_;
  Tape& tape_;
  Mode mode_;
  std::mt19937_64 rng_;
  std::vector<Var> vars_;
};

/// Encoder output for a single input.
struct Memory {
  Matrix states;
  std::vector<unsigned char> key_valid;
};

/// Inference facade over ForwardPass (eval mode, no gradient tape).
class Model {
 public:
  Model(ModelConfig config, ModelParams params);

  const ModelConfig& config() const { return config_; }
  const ModelParams& params() const { return params_; }

  Tensor embed_image(const Image& image) const;
  Tensor fuse(const EncoderInput& input) const;
  Memory encode(const EncoderInput& input) const;
  /// Teacher-forced logits, one row per decoder input position.
  Tensor decode(const Memory& memory, std::span<const int> decoder_input) const;
  /// Logits of the last position of `prefix`.
  Eigen::RowVectorXd decode_step(const Memory& memory, std::span<const int> prefix) const;

 private:
  ModelConfig config_;
  ModelParams params_;
};

/// Step-wise decoding for beam search. Self-attention keys and values of
/// earlier positions are cached per hypothesis; cross-attention keys and
/// values are computed once from the memory. Matches Model::decode to
/// rounding (different GEMM blocking).
class IncrementalDecoder {
 public:
  IncrementalDecoder(const Model& model, const Memory& memory);

  /// Starts `n` hypotheses fed BOS; returns n x V logits.
  Matrix start(int n);
  /// Hypothesis i continues hypothesis `parents[i]` of the previous call
  /// with `tokens[i]`; returns one row of logits per hypothesis.
  Matrix step(std::span<const int> parents, std::span<const int> tokens);
  /// Tokens fed so far per hypothesis, BOS included.
  int length() const { return length_; }

 private:
  struct Affine {
    const Matrix* w;
    const Matrix* b;
  };
  struct LayerNormWeights {
    const Matrix* g;
    const Matrix* b;
  };
  struct LayerWeights {
    LayerNormWeights ln1, ln2, ln3;
    Affine q, k, v, o, cq, co, ffn1, ffn2;
    Matrix cross_k, cross_v;
  };
  Matrix advance(std::span<const int> tokens);

  const Model& model_;
  std::vector<LayerWeights> layers_;
  const std::vector<unsigned char>& key_valid_;
  std::vector<std::vector<Matrix>> keys_, values_;  // [hypothesis][layer], rows = positions
  int length_ = 0;
  int hyps_ = 0;
};

/// Text part after truncation: instruction, SEP, then as much text as fits.
std::vector<int> fused_text_ids(const EncoderInput& input, int max_text_len);

}  // namespace cxo
