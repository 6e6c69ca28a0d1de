#pragma once

// Decoding strategies for the toy LM: length-normalised beam search and
// nucleus sampling with a repetition penalty.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mmseq/model.hpp"
#include "mmseq/vocab.hpp"

namespace mmseq {

enum class DecodeMode { Beam, Sample };

struct DecodeStrategy {
  DecodeMode mode = DecodeMode::Sample;
  std::size_t beam_size = 5;
  double top_p = 1.0;
  double repetition_penalty = 1.0;
  double temperature = 1.0;
  std::size_t max_new_tokens = 64;
  std::uint64_t seed = 0;

  void validate() const;

  // Per-target defaults: text beam 5; image and speech top-p 0.7; music
  // top-p 1.0 with repetition penalty 1.15.
  static DecodeStrategy text();
  static DecodeStrategy image();
  static DecodeStrategy speech();
  static DecodeStrategy music();
  // Looks up one of the above by target name ("text", "image", ...).
  static DecodeStrategy for_target(std::string_view target);

  nlohmann::json to_json() const;
  // Missing keys keep the values already in `base`.
  static DecodeStrategy from_json(const nlohmann::json& j, DecodeStrategy base);
  static DecodeStrategy from_json(const nlohmann::json& j) { return from_json(j, DecodeStrategy()); }
};

// Every distinct token of `history` gets its logit divided by `penalty` when
// positive and multiplied by it otherwise. Returns how many entries changed.
std::size_t apply_repetition_penalty(std::span<double> logits, std::span<const TokenId> history, double penalty);

std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);

// Smallest prefix of the probability-sorted vocabulary (ties by lower id)
// whose mass reaches top_p. Returned ids are in that sorted order.
std::vector<TokenId> nucleus_support(std::span<const double> probs, double top_p);

// probs restricted to nucleus_support and renormalised; zeros elsewhere.
std::vector<double> nucleus_filter(std::span<const double> probs, double top_p);

// Draws an index from `probs` using one uniform variate.
TokenId sample_index(std::span<const double> probs, std::mt19937_64& rng);

struct DecodeTraceStep {
  std::size_t step = 0;
  DecodeMode mode = DecodeMode::Sample;
  double top_p = 1.0;
  double repetition_penalty = 1.0;
  double temperature = 1.0;
  std::size_t penalized = 0;     // logits touched by the penalty (first beam for beam mode)
  std::size_t support_size = 0;  // nucleus size; live beams in beam mode
  TokenId token = 0;             // sampled token, or the head of the best beam

  nlohmann::json to_json() const;
};

using DecodeTrace = std::function<void(const DecodeTraceStep&)>;

// Continues `prompt` and returns only the new tokens. Stops after emitting
// `eos` (included in the output) or after max_new_tokens, or when the context
// reaches max_seq_len.
std::vector<TokenId> generate(const ModelParams& params, std::span<const TokenId> prompt,
                              const DecodeStrategy& strategy, std::optional<TokenId> eos,
                              const DecodeTrace& trace = {});

// Same, with <eos> taken from the vocabulary.
std::vector<TokenId> generate(const ModelParams& params, const UnifiedVocab& vocab, std::span<const TokenId> prompt,
                              const DecodeStrategy& strategy, const DecodeTrace& trace = {});

}  // namespace mmseq
