#pragma once

// End-to-end commands behind the CLI: tokenizer training, dataset assembly,
// LM training, generation with parsing and de-tokenization, dialog
// synthesis and evaluation. All settings come from one JSON config.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmseq/decoding.hpp"
#include "mmseq/model.hpp"
#include "mmseq/rvq.hpp"
#include "mmseq/sequence.hpp"
#include "mmseq/vocab.hpp"

namespace mmseq::pipeline {

struct ModalitySettings {
  std::string name;
  RVQConfig rvq;
  MediaLayout layout;
  std::filesystem::path codebooks;  // written by train-tokenizer
  std::filesystem::path frames;     // tokenizer training data (frames JSON)
};

struct Paths {
  std::filesystem::path vocab;
  std::filesystem::path records;          // raw records, JSONL
  std::filesystem::path heldout_records;  // optional
  std::filesystem::path dataset;          // packed sequences, JSONL
  std::filesystem::path heldout;          // packed held-out sequences, JSONL
  std::filesystem::path checkpoint;
  std::filesystem::path init_checkpoint;  // optional text-only starting point
  std::filesystem::path train_log;
  std::filesystem::path prompts;
  std::filesystem::path generate_out;
  std::filesystem::path eval_report;
};

struct DatasetSettings {
  std::size_t max_len = 256;
  bool pad = false;
  bool mask_human_turn = false;
  // 0 keeps every valid record once, in file order; otherwise draws this
  // many samples by the mixture weights.
  std::size_t num_samples = 0;
  MixtureSpec mixture = MixtureSpec::pretraining_default();
};

struct PipelineConfig {
  std::filesystem::path base_dir;  // relative paths resolve against this
  std::uint64_t seed = 0;
  std::uint32_t text_base = 256;
  std::vector<ModalitySettings> modalities;
  Paths paths;
  DatasetSettings dataset;
  ModelConfig model;
  TrainConfig train;
  std::map<std::string, DecodeStrategy, std::less<>> decode;
  std::size_t refine_iterations = 4;
  std::size_t eval_generations = 100;
  nlohmann::json synth = nlohmann::json::object();

  static PipelineConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  static PipelineConfig load(const std::filesystem::path& path);

  // Replaces every seed in the config (tokenizers, model, training,
  // decoding, synthesis) with `seed`.
  void override_seed(std::uint64_t seed);

  const ModalitySettings& modality(std::string_view name) const;
  const DecodeStrategy& strategy_for(std::string_view target) const;
  // Text block, then the configured modalities in config order.
  UnifiedVocab build_vocab() const;
};

struct TokenizerResult {
  std::filesystem::path path;
  RVQConfig config;
  std::vector<double> layer_errors;
};

TokenizerResult cmd_train_tokenizer(const PipelineConfig& config, std::string_view modality);

struct BuildReport {
  std::size_t records = 0;
  std::size_t skipped = 0;  // invalid records, each logged with its reason
  std::size_t heldout_records = 0;
  std::size_t heldout_skipped = 0;
  std::size_t samples = 0;
  std::size_t sequences = 0;
  std::size_t sample_tokens = 0;  // summed sample lengths
  std::size_t loss_tokens = 0;    // mask-true tokens in the packed output
  std::map<std::string, std::size_t> samples_per_dataset;
  nlohmann::json histogram;  // per modality token counts and length buckets

  nlohmann::json to_json() const;
};

BuildReport cmd_build_dataset(const PipelineConfig& config);

struct TrainReport {
  std::size_t steps = 0;
  double first_loss = 0.0;
  double final_loss = 0.0;   // last training batch
  double heldin_loss = 0.0;  // mean over the whole training set after training
  std::filesystem::path checkpoint;
};

TrainReport cmd_train(const PipelineConfig& config);

struct GenerateReport {
  std::vector<nlohmann::json> results;  // one record per prompt
  double validity_rate = 0.0;
};

// Runs `count` generations (0: one per prompt), cycling through the prompts
// and offsetting the sampling seed by the generation index. Output goes to
// out_dir, or paths.generate_out when empty.
GenerateReport cmd_generate(const PipelineConfig& config, const std::filesystem::path& prompts, std::size_t count = 0,
                            const std::filesystem::path& out_dir = {});

nlohmann::json cmd_synth(const PipelineConfig& config);

nlohmann::json cmd_eval(const PipelineConfig& config);

// Writes a small synthetic corpus (frames, records, prompts) and a config
// that runs the whole pipeline on it in a few minutes. Returns the config path.
std::filesystem::path write_toy_corpus(const std::filesystem::path& dir, std::uint64_t seed);

// Sequence JSONL used by build-dataset and train.
std::vector<TokenSequence> read_sequences(const std::filesystem::path& path);
void write_sequences(const std::filesystem::path& path, const std::vector<TokenSequence>& seqs);

}  // namespace mmseq::pipeline
