#pragma once

// Training-sequence assembly: code-matrix flattening, the paired and
// interleaved sample templates, packing and dataset-mixture sampling.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mmseq/rvq.hpp"
#include "mmseq/vocab.hpp"

namespace mmseq {

enum class SegmentKind { Text, Special, Modality };

// A contiguous token range. Modality segments include their bracket tokens;
// `payload` holds the local ids between the brackets.
struct Segment {
  SegmentKind kind = SegmentKind::Text;
  std::string name;  // modality name or special name; empty for text
  std::size_t start = 0;
  std::size_t end = 0;
  std::vector<std::uint32_t> payload;

  bool operator==(const Segment&) const = default;
};

struct TokenSequence {
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> loss_mask;
  std::vector<Segment> segments;

  std::size_t size() const { return tokens.size(); }
  bool operator==(const TokenSequence&) const = default;
};

// Byte-level text tokens (ids below the vocabulary's text base).
std::vector<TokenId> encode_text(const UnifiedVocab& vocab, std::string_view text);

enum class FlattenMode {
  LayerOffsets,  // layer l occupies local ids [l*K, (l+1)*K)
  Shared,        // all layers share [0, K)
};

std::vector<std::uint32_t> flatten_codes(const CodeMatrix& codes, std::uint32_t codebook_size,
                                         FlattenMode mode = FlattenMode::LayerOffsets);
CodeMatrix unflatten_codes(std::span<const std::uint32_t> seq, std::size_t num_layers,
                           std::uint32_t codebook_size, FlattenMode mode = FlattenMode::LayerOffsets);

// How a modality's code matrix becomes language-model tokens.
enum class MediaScheme {
  Single,        // one-layer VQ (image)
  SemanticOnly,  // RVQ, only layer 1 enters the LM (speech)
  Flattened,     // RVQ flattened frame by frame (music)
};

struct MediaLayout {
  std::string modality;
  MediaScheme scheme = MediaScheme::Single;
  std::size_t num_layers = 1;
  std::uint32_t codebook_size = 1;
  FlattenMode flatten = FlattenMode::LayerOffsets;

  // Local vocabulary size this layout contributes.
  std::uint32_t vocab_size() const;
  std::vector<std::uint32_t> to_local_ids(const CodeMatrix& codes) const;
  // Inverse of to_local_ids; SemanticOnly yields a T x 1 matrix.
  CodeMatrix from_local_ids(std::span<const std::uint32_t> ids) const;

  static MediaLayout image(std::uint32_t codebook_size);
  static MediaLayout speech(std::uint32_t codebook_size, std::size_t num_layers = 8);
  static MediaLayout music(std::uint32_t codebook_size, std::size_t num_layers = 4,
                           FlattenMode mode = FlattenMode::LayerOffsets);
};

enum class Direction { XToText, TextToX };

struct SampleOptions {
  // Clear the loss mask over the human turn ([Human] through <eoh>).
  bool mask_human_turn = false;
};

TokenSequence build_pair_sample(const UnifiedVocab& vocab, std::string_view instruction,
                                std::string_view modality, std::span<const std::uint32_t> media,
                                std::string_view caption, Direction direction,
                                const SampleOptions& options = {});

// The human turn plus the assistant tag, i.e. what a generator is prompted with.
TokenSequence build_pair_prompt(const UnifiedVocab& vocab, std::string_view instruction,
                                std::string_view modality, std::span<const std::uint32_t> media,
                                std::string_view caption, Direction direction);

struct DocumentChunk {
  std::string text;
  std::string modality;  // empty for a text chunk
  std::vector<std::uint32_t> ids;

  bool is_media() const { return !modality.empty(); }
  static DocumentChunk of_text(std::string t) { return {std::move(t), {}, {}}; }
  static DocumentChunk of_media(std::string m, std::vector<std::uint32_t> i) {
    return {{}, std::move(m), std::move(i)};
  }
};

TokenSequence build_interleaved_sample(const UnifiedVocab& vocab, std::span<const DocumentChunk> document);

// Greedy first-fit packing. With `pad`, every output is padded to max_len
// and the pad positions carry a false loss mask.
std::vector<TokenSequence> pack(std::span<const TokenSequence> samples, std::size_t max_len,
                                std::optional<TokenId> pad = std::nullopt);

struct MixtureSpec {
  std::vector<std::pair<std::string, double>> weights;

  void validate() const;
  // Pre-training sample rates: interleaved image-text 0.05, image-text 0.3,
  // two speech-text groups 0.13 and 0.27, music-text 0.25.
  static MixtureSpec pretraining_default();
};

std::vector<std::string> sample_mixture(const MixtureSpec& spec, std::uint64_t seed, std::size_t n);

// Instructions used when a record does not carry its own.
const std::vector<std::string>& default_instructions(std::string_view modality, Direction direction);

}  // namespace mmseq
