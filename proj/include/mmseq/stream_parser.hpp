#pragma once

// Validation and segmentation of generated global-token streams, and the
// de-tokenizers that turn modality segments back into frames.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmseq/refiner.hpp"
#include "mmseq/rvq.hpp"
#include "mmseq/sequence.hpp"
#include "mmseq/vocab.hpp"

namespace mmseq {

enum class ViolationKind {
  UnmatchedBracket,     // begin never closed, or end with nothing open
  NestedSpan,           // begin while a span is open
  WrongEndBracket,      // end bracket of a different modality
  OrphanModalityToken,  // modality token outside any span
  WrongModalityToken,   // foreign token inside a span
  OutOfVocabulary,
};

std::string_view violation_name(ViolationKind kind);

struct Violation {
  ViolationKind kind;
  std::size_t position;
  std::string detail;
};

std::vector<Violation> validate(const UnifiedVocab& vocab, std::span<const TokenId> tokens);

enum class ParseMode {
  Strict,   // MalformedStream unless validate() is clean
  Salvage,  // drop offending tokens, close a span left open at the end
};

std::vector<Segment> parse_segments(const UnifiedVocab& vocab, std::span<const TokenId> tokens,
                                    ParseMode mode = ParseMode::Strict);

struct ModalityCodec {
  MediaLayout layout;
  const CodebookSet* books = nullptr;
};

struct SpeechRefinement {
  const Predictor* predictor = nullptr;
  RefineSchedule schedule = RefineSchedule::cosine();
};

using CodecMap = std::map<std::string, ModalityCodec, std::less<>>;

// Image: VQ decode. Music: unflatten then RVQ decode. Speech: semantic codes,
// completed by the refiner when one is given, otherwise layer 1 only.
Frames detokenize(const Segment& segment, const CodecMap& codecs, const SpeechRefinement* refiner = nullptr);

// {"kind", "start", "end", "payload"} per segment; kind is "text", a special
// name, or a modality name.
nlohmann::json segments_to_json(const std::vector<Segment>& segments);

}  // namespace mmseq
