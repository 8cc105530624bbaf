#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bllm/autograd.hpp"
#include "bllm/bev.hpp"
#include "bllm/checkpoint.hpp"
#include "bllm/matrix.hpp"
#include "bllm/optim.hpp"
#include "bllm/vocab.hpp"

namespace bllm {

struct ModelConfig {
  std::size_t image_size = 448;
  std::size_t patch = 32;
  std::size_t d_bev = 64;
  std::size_t d = 128;
  std::size_t encoder_layers = 2;
  std::size_t encoder_heads = 4;
  std::size_t decoder_layers = 2;
  std::size_t decoder_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t vocab_size = 512;
  std::size_t max_seq = 256;
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;
  // Also train the patch and position embeddings of the visual encoder.
  bool train_embeddings = false;
  std::uint64_t seed = 7;

  std::size_t patches() const;
  std::size_t grouped_tokens() const { return patches() / 4; }
  // Every violated invariant, one message each.
  std::vector<std::string> violations() const;
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(std::string_view text);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class TokenStage { patched, encoded, grouped, projected };

std::string_view to_string(TokenStage s);

struct VisualTokens {
  Matrix z;  // tokens x width
  TokenStage stage = TokenStage::patched;
};

struct Projection {
  Matrix weight;  // d x 4*d_bev
  std::optional<Matrix> bias;  // 1 x d
};

// Effective weight W + (alpha/r) B A; B starts at zero.
struct LoraLayer {
  Matrix base;  // out x in
  Matrix a;     // r x in
  Matrix b;     // out x r
  double alpha = 1.0;

  std::size_t rank() const { return a.rows(); }
  double scale() const { return alpha / static_cast<double>(rank()); }
  Matrix merged() const;
};

// x Wᵀ + (alpha/r) x Aᵀ Bᵀ
Matrix lora_forward(const Matrix& x, const LoraLayer& layer);

// Decoder input layout: [visual][SEP][annotation][SEP][question][SEP][answer..., EOS]
// Logits at `loss_positions` are trained to predict `targets`.
struct DecoderInput {
  std::size_t visual_tokens = 0;
  std::vector<std::size_t> text;  // ids after the visual block
  std::vector<std::size_t> loss_positions;  // absolute sequence positions
  std::vector<std::size_t> targets;

  std::size_t length() const { return visual_tokens + text.size(); }
};

// Throws ShapeError naming the segment that overflows max_seq.
DecoderInput assemble_context(std::size_t visual_tokens, std::span<const std::size_t> annotation,
                              std::span<const std::size_t> question,
                              std::span<const std::size_t> answer, std::size_t max_seq);

class MultimodalModel {
 public:
  struct Linear {
    Parameter* weight = nullptr;  // out x in
    Parameter* bias = nullptr;    // 1 x out, optional
  };
  struct LoraLinear {
    Parameter* base = nullptr;
    Parameter* a = nullptr;
    Parameter* b = nullptr;
    double scale = 1.0;
  };
  struct Norm {
    Parameter* gain = nullptr;
    Parameter* bias = nullptr;
  };
  struct EncoderBlock {
    Norm ln1;
    Linear q, k, v, o;
    Norm ln2;
    Linear up, down;
  };
  struct DecoderBlock {
    Norm ln1;
    LoraLinear q;
    Linear k;
    LoraLinear v;
    Linear o;
    Norm ln2;
    Linear up, down;
  };

  MultimodalModel(ModelConfig config, Vocabulary vocab);
  MultimodalModel(const MultimodalModel&) = delete;
  MultimodalModel& operator=(const MultimodalModel&) = delete;
  MultimodalModel(MultimodalModel&&) = default;
  MultimodalModel& operator=(MultimodalModel&&) = default;

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::vector<Parameter*> trainable_parameters();
  Parameter& parameter(std::string_view name);
  const Parameter& parameter(std::string_view name) const;
  std::size_t trainable_count() const;
  // SHA-256 over name, shape and bytes of every frozen tensor.
  std::string frozen_digest() const;

  // Tape-level pipeline stages.
  Var patch_embed(Tape& t, const BevImage& img);
  Var encode(Tape& t, Var patched);
  Var concat4(Tape& t, Var encoded);
  Var project(Tape& t, Var grouped);
  // Logits (one row per requested position) of the decoder run over
  // [projected visual tokens, embedded text].
  Var decoder_logits(Tape& t, Var projected, std::span<const std::size_t> text,
                     std::span<const std::size_t> positions);
  // Sum of token cross-entropies over the loss positions divided by normalizer.
  Var loss(Tape& t, Var grouped, const DecoderInput& in, double normalizer);

  // Frozen visual path up to Concat_4, evaluated without gradients.
  Matrix grouped_features(const BevImage& img);

  // Greedy decoding; stops at EOS or after max_new tokens.
  std::vector<std::size_t> generate(const Matrix& grouped, std::span<const std::size_t> annotation,
                                    std::span<const std::size_t> question, std::size_t max_new);
  std::string answer(const BevImage& img, std::string_view annotation, std::string_view question,
                     std::size_t max_new = 16);

  Checkpoint to_checkpoint(const OptimState* optim = nullptr) const;
  // Rebuilds the model for `config`, then restores every tensor; a tensor
  // whose shape disagrees with the config raises LoadError naming it.
  static MultimodalModel from_checkpoint(const Checkpoint& ckpt, OptimState* optim = nullptr);
  static MultimodalModel from_checkpoint(const Checkpoint& ckpt, const ModelConfig& config,
                                         OptimState* optim = nullptr);

 private:
  Parameter* add(std::string name, std::size_t rows, std::size_t cols, double stddev, double fill = 0.0);
  Var linear(Tape& t, Var x, const Linear& l);
  Var lora(Tape& t, Var x, const LoraLinear& l);
  Var norm(Tape& t, Var x, const Norm& n);
  void set_trainable();

  ModelConfig config_;
  Vocabulary vocab_;
  std::deque<Parameter> store_;

  Linear patch_;
  Parameter* patch_pos_ = nullptr;
  std::vector<EncoderBlock> encoder_;
  Norm encoder_ln_;
  Linear projector_;
  Parameter* tok_emb_ = nullptr;
  Parameter* pos_emb_ = nullptr;
  std::vector<DecoderBlock> decoder_;
  Norm decoder_ln_;
  Parameter* lm_head_ = nullptr;
};

// Value-level wrappers over the tape pipeline, checking stage contracts.
VisualTokens patch_embed(MultimodalModel& model, const BevImage& img);
VisualTokens encode(MultimodalModel& model, const VisualTokens& tokens);
VisualTokens concat4(const VisualTokens& tokens);
VisualTokens project(const VisualTokens& tokens, const Projection& p);

}  // namespace bllm
