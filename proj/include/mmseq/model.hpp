#pragma once

// Small decoder-only transformer over the unified vocabulary.
//
// Pre-norm blocks (RMSNorm -> causal multi-head attention, RMSNorm -> GELU
// MLP), learned absolute positions, untied output projection. Everything is
// double precision; checkpoints store 32-bit floats.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mmseq/sequence.hpp"
#include "mmseq/vocab.hpp"

namespace mmseq {

struct ModelConfig {
  std::uint32_t vocab_size = 0;
  std::uint32_t dim = 128;
  std::uint32_t num_layers = 4;
  std::uint32_t num_heads = 4;
  std::uint32_t max_seq_len = 256;
  std::uint64_t seed = 0;
  double init_std = 0.02;

  std::uint32_t hidden() const { return 4 * dim; }
  std::uint32_t head_dim() const { return dim / num_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;

  bool operator==(const Tensor&) const = default;
};

class ModelParams {
 public:
  ModelConfig config;
  // Fixed order: tok_emb, pos_emb, then per layer {ln1, wq, wk, wv, wo, ln2,
  // w1, b1, w2, b2}, then ln_f, w_out.
  std::vector<Tensor> tensors;

  static constexpr std::size_t kPerLayer = 10;
  enum LayerSlot : std::size_t { Ln1 = 0, Wq, Wk, Wv, Wo, Ln2, W1, B1, W2, B2 };

  const Tensor& token_embedding() const { return tensors[0]; }
  const Tensor& position_embedding() const { return tensors[1]; }
  const Tensor& layer(std::size_t l, LayerSlot slot) const { return tensors[2 + l * kPerLayer + slot]; }
  const Tensor& final_norm() const { return tensors[2 + config.num_layers * kPerLayer]; }
  const Tensor& output_projection() const { return tensors[3 + config.num_layers * kPerLayer]; }
  Tensor& token_embedding() { return tensors[0]; }
  Tensor& position_embedding() { return tensors[1]; }
  Tensor& layer(std::size_t l, LayerSlot slot) { return tensors[2 + l * kPerLayer + slot]; }
  Tensor& final_norm() { return tensors[2 + config.num_layers * kPerLayer]; }
  Tensor& output_projection() { return tensors[3 + config.num_layers * kPerLayer]; }

  std::size_t parameter_count() const;
  bool all_finite() const;
  ModelParams zeros_like() const;
  // Sum of squares over every tensor.
  double squared_norm() const;

  bool operator==(const ModelParams&) const = default;
};

ModelParams init_model(const ModelConfig& config);

// Grows the embedding rows and output-projection columns to new_vocab_size.
// New entries are drawn from N(0, init_std) with `seed`; existing values are
// copied unchanged.
ModelParams expand_vocab(const ModelParams& params, std::uint32_t new_vocab_size, std::uint64_t seed);

// Logits for every position, n x V row-major.
std::vector<double> forward(const ModelParams& params, std::span<const TokenId> tokens);

// Row-wise softmax of an n x V logit block.
std::vector<double> softmax_rows(std::span<const double> logits, std::size_t vocab);

// Mean negative log-likelihood of `targets` under `logits` (n x V) over the
// mask-true rows.
double nll_loss(std::span<const double> logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask,
                std::size_t vocab);

// Next-token loss of a batch: logits at position i score token i+1, counted
// when loss_mask[i+1] is set; the mean runs over all counted targets. When
// `grad` is non-null it receives d(loss)/d(params) (overwritten).
double loss_and_grad(const ModelParams& params, std::span<const TokenSequence> batch, ModelParams* grad);

struct TrainConfig {
  double peak_lr = 6e-5;
  double warmup_ratio = 0.03;
  std::size_t batch_size = 16;
  std::size_t steps = 2000;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
  std::size_t warmup_steps() const;
  // Linear warmup to peak_lr, then cosine decay to zero at `steps`.
  double lr_at(std::size_t step) const;
};

// Scales `grad` so its global L2 norm is at most max_norm; returns the norm
// before clipping.
double clip_global_norm(ModelParams& grad, double max_norm);

struct AdamState {
  ModelParams m;
  ModelParams v;
  std::size_t t = 0;

  static AdamState for_params(const ModelParams& params);
};

struct StepResult {
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

StepResult train_step(ModelParams& params, AdamState& state, std::span<const TokenSequence> batch,
                      const TrainConfig& config, std::size_t step);

// "MMLM" checkpoint: header, tensor manifest (name, shape, byte offset), f32 payload.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

// Key/value cache for one partially decoded sequence.
struct DecoderState {
  std::vector<std::vector<double>> keys;    // per layer, length x dim
  std::vector<std::vector<double>> values;  // per layer, length x dim
  std::size_t length = 0;
};

// Appends one token at a time and returns the next-token logits. Row-level
// arithmetic matches forward(), so the logits agree with it exactly.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const ModelParams& params) : params_(params) {}

  DecoderState start() const;
  std::vector<double> append(DecoderState& state, TokenId token) const;
  const ModelParams& params() const { return params_; }

 private:
  const ModelParams& params_;
};

}  // namespace mmseq
