#include "mmseq/sequence.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "mmseq/error.hpp"

namespace mmseq {

std::vector<TokenId> encode_text(const UnifiedVocab& vocab, std::string_view text) {
  std::vector<TokenId> out;
  out.reserve(text.size());
  for (char ch : text) {
    const auto byte = static_cast<unsigned char>(ch);
    if (byte >= vocab.text_base_size()) {
      throw Error(Errc::OutOfRange, "byte " + std::to_string(byte) + " outside text vocabulary of size " +
                                        std::to_string(vocab.text_base_size()));
    }
    out.push_back(byte);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Flattening

std::vector<std::uint32_t> flatten_codes(const CodeMatrix& codes, std::uint32_t codebook_size, FlattenMode mode) {
  std::vector<std::uint32_t> out;
  out.reserve(codes.t * codes.q);
  for (std::size_t t = 0; t < codes.t; ++t) {
    for (std::size_t l = 0; l < codes.q; ++l) {
      const std::uint32_t c = codes.at(t, l);
      if (c >= codebook_size) {
        throw Error(Errc::IndexOutOfRange, "code " + std::to_string(c) + " >= codebook size " + std::to_string(codebook_size));
      }
      out.push_back(mode == FlattenMode::LayerOffsets ? c + static_cast<std::uint32_t>(l) * codebook_size : c);
    }
  }
  return out;
}

CodeMatrix unflatten_codes(std::span<const std::uint32_t> seq, std::size_t num_layers, std::uint32_t codebook_size,
                           FlattenMode mode) {
  if (num_layers == 0) throw Error(Errc::InvalidConfig, "num_layers must be positive");
  if (seq.size() % num_layers != 0) {
    throw Error(Errc::LengthNotDivisible, std::to_string(seq.size()) + " tokens for " + std::to_string(num_layers) + " layers");
  }
  CodeMatrix out(seq.size() / num_layers, num_layers);
  for (std::size_t p = 0; p < seq.size(); ++p) {
    const std::size_t layer = p % num_layers;
    const std::uint64_t lo = mode == FlattenMode::LayerOffsets ? layer * codebook_size : 0;
    const std::uint64_t id = seq[p];
    if (id < lo || id >= lo + codebook_size) {
      throw Error(Errc::LayerRangeViolation, "id " + std::to_string(id) + " at position " + std::to_string(p) +
                                                 " is outside layer " + std::to_string(layer) + "'s range");
    }
    out.codes[p] = static_cast<std::uint32_t>(id - lo);
  }
  return out;
}

std::uint32_t MediaLayout::vocab_size() const {
  if (scheme == MediaScheme::Flattened && flatten == FlattenMode::LayerOffsets) {
    return static_cast<std::uint32_t>(num_layers) * codebook_size;
  }
  return codebook_size;
}

std::vector<std::uint32_t> MediaLayout::to_local_ids(const CodeMatrix& codes) const {
  switch (scheme) {
    case MediaScheme::Single:
      if (codes.q != 1) throw Error(Errc::DimensionMismatch, modality + " codes must have one layer");
      return flatten_codes(codes, codebook_size, FlattenMode::Shared);
    case MediaScheme::SemanticOnly:
      if (codes.q == 0) throw Error(Errc::DimensionMismatch, modality + " codes have no layers");
      return flatten_codes(codes.column(0), codebook_size, FlattenMode::Shared);
    case MediaScheme::Flattened:
      if (codes.q != num_layers) {
        throw Error(Errc::DimensionMismatch, modality + " codes must have " + std::to_string(num_layers) + " layers");
      }
      return flatten_codes(codes, codebook_size, flatten);
  }
  return {};
}

CodeMatrix MediaLayout::from_local_ids(std::span<const std::uint32_t> ids) const {
  if (scheme == MediaScheme::Flattened) return unflatten_codes(ids, num_layers, codebook_size, flatten);
  return unflatten_codes(ids, 1, codebook_size, FlattenMode::Shared);
}

MediaLayout MediaLayout::image(std::uint32_t codebook_size) {
  return {"image", MediaScheme::Single, 1, codebook_size, FlattenMode::Shared};
}

MediaLayout MediaLayout::speech(std::uint32_t codebook_size, std::size_t num_layers) {
  return {"speech", MediaScheme::SemanticOnly, num_layers, codebook_size, FlattenMode::Shared};
}

MediaLayout MediaLayout::music(std::uint32_t codebook_size, std::size_t num_layers, FlattenMode mode) {
  return {"music", MediaScheme::Flattened, num_layers, codebook_size, mode};
}

// ---------------------------------------------------------------------------
// Templates

namespace {

// Appends tokens while recording segments the same way the stream parser
// would recover them.
class SequenceWriter {
 public:
  explicit SequenceWriter(const UnifiedVocab& vocab) : vocab_(vocab) {
    if (!vocab.frozen()) throw Error(Errc::NotFrozen, "vocabulary must be frozen");
  }

  void text(std::string_view s) {
    if (s.empty()) return;
    const auto ids = encode_text(vocab_, s);
    if (seq_.segments.empty() || seq_.segments.back().kind != SegmentKind::Text) {
      seq_.segments.push_back({SegmentKind::Text, {}, seq_.tokens.size(), seq_.tokens.size(), {}});
    }
    push(ids);
    seq_.segments.back().end = seq_.tokens.size();
  }

  void special(std::string_view name) {
    const TokenId id = vocab_.special_id(name);
    seq_.segments.push_back({SegmentKind::Special, std::string(name), seq_.tokens.size(), seq_.tokens.size() + 1, {}});
    push(std::span<const TokenId>(&id, 1));
  }

  void media(std::string_view modality, std::span<const std::uint32_t> local_ids) {
    const auto& entry = vocab_.modality(modality);
    Segment seg{SegmentKind::Modality, entry.name, seq_.tokens.size(), 0, {local_ids.begin(), local_ids.end()}};
    std::vector<TokenId> ids;
    ids.reserve(local_ids.size() + 2);
    ids.push_back(entry.begin_token);
    for (auto local : local_ids) ids.push_back(vocab_.to_global(modality, local));
    ids.push_back(entry.end_token);
    push(ids);
    seg.end = seq_.tokens.size();
    seq_.segments.push_back(std::move(seg));
  }

  void set_mask(bool on) { mask_ = on; }
  TokenSequence finish() && { return std::move(seq_); }

 private:
  void push(std::span<const TokenId> ids) {
    seq_.tokens.insert(seq_.tokens.end(), ids.begin(), ids.end());
    seq_.loss_mask.insert(seq_.loss_mask.end(), ids.size(), mask_ ? 1 : 0);
  }

  const UnifiedVocab& vocab_;
  TokenSequence seq_;
  bool mask_ = true;
};

void write_human_turn(SequenceWriter& w, std::string_view instruction, std::string_view modality,
                      std::span<const std::uint32_t> media, std::string_view caption, Direction direction) {
  w.special(special::kHuman);
  w.text(": ");
  w.text(instruction);
  if (direction == Direction::XToText) {
    w.text(".");
    w.media(modality, media);
  } else {
    w.text(". This is input:");
    w.text(caption);
  }
  w.special(special::kEoh);
}

void check_pair_inputs(const UnifiedVocab& vocab, std::string_view instruction, std::string_view modality) {
  if (instruction.empty()) throw Error(Errc::EmptyInstruction, "instruction must be non-empty");
  (void)vocab.modality(modality);
}

}  // namespace

TokenSequence build_pair_sample(const UnifiedVocab& vocab, std::string_view instruction, std::string_view modality,
                                std::span<const std::uint32_t> media, std::string_view caption, Direction direction,
                                const SampleOptions& options) {
  check_pair_inputs(vocab, instruction, modality);
  SequenceWriter w(vocab);
  w.set_mask(!options.mask_human_turn);
  write_human_turn(w, instruction, modality, media, caption, direction);
  w.set_mask(true);
  w.special(special::kAssistant);
  w.text(": ");
  if (direction == Direction::XToText) {
    w.text(caption);
  } else {
    w.media(modality, media);
  }
  w.special(special::kEos);
  return std::move(w).finish();
}

TokenSequence build_pair_prompt(const UnifiedVocab& vocab, std::string_view instruction, std::string_view modality,
                                std::span<const std::uint32_t> media, std::string_view caption, Direction direction) {
  check_pair_inputs(vocab, instruction, modality);
  SequenceWriter w(vocab);
  write_human_turn(w, instruction, modality, media, caption, direction);
  w.special(special::kAssistant);
  w.text(": ");
  return std::move(w).finish();
}

TokenSequence build_interleaved_sample(const UnifiedVocab& vocab, std::span<const DocumentChunk> document) {
  SequenceWriter w(vocab);
  for (const auto& chunk : document) {
    if (chunk.is_media()) {
      w.media(chunk.modality, chunk.ids);
    } else {
      w.text(chunk.text);
    }
  }
  w.special(special::kEos);
  return std::move(w).finish();
}

// ---------------------------------------------------------------------------
// Packing

std::vector<TokenSequence> pack(std::span<const TokenSequence> samples, std::size_t max_len, std::optional<TokenId> pad) {
  if (max_len == 0) throw Error(Errc::InvalidConfig, "max_len must be positive");
  std::vector<TokenSequence> bins;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.size() > max_len) {
      throw Error(Errc::SampleTooLong, "sample " + std::to_string(i) + " has " + std::to_string(s.size()) +
                                           " tokens, max_len is " + std::to_string(max_len));
    }
    auto it = std::find_if(bins.begin(), bins.end(), [&](const TokenSequence& b) { return b.size() + s.size() <= max_len; });
    if (it == bins.end()) {
      bins.emplace_back();
      it = std::prev(bins.end());
    }
    const std::size_t shift = it->size();
    it->tokens.insert(it->tokens.end(), s.tokens.begin(), s.tokens.end());
    it->loss_mask.insert(it->loss_mask.end(), s.loss_mask.begin(), s.loss_mask.end());
    for (auto seg : s.segments) {
      seg.start += shift;
      seg.end += shift;
      // Adjacent text runs from consecutive samples would parse as one run.
      auto& segs = it->segments;
      if (seg.kind == SegmentKind::Text && !segs.empty() && segs.back().kind == SegmentKind::Text &&
          segs.back().end == seg.start) {
        segs.back().end = seg.end;
      } else {
        segs.push_back(std::move(seg));
      }
    }
  }
  if (pad) {
    for (auto& b : bins) {
      while (b.size() < max_len) {
        b.segments.push_back({SegmentKind::Special, std::string(special::kPad), b.size(), b.size() + 1, {}});
        b.tokens.push_back(*pad);
        b.loss_mask.push_back(0);
      }
    }
  }
  return bins;
}

// ---------------------------------------------------------------------------
// Mixture sampling

void MixtureSpec::validate() const {
  bool any_positive = false;
  for (const auto& [name, w] : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw Error(Errc::InvalidConfig, "weight for " + name + " must be finite and >= 0");
    any_positive = any_positive || w > 0.0;
  }
  if (!any_positive) throw Error(Errc::AllZeroWeights, "mixture needs at least one positive weight");
}

MixtureSpec MixtureSpec::pretraining_default() {
  return MixtureSpec{{{"interleaved_image_text", 0.05},
                      {"image_text", 0.3},
                      {"speech_text_mls", 0.13},
                      {"speech_text_cv_giga", 0.27},
                      {"music_text", 0.25}}};
}

std::vector<std::string> sample_mixture(const MixtureSpec& spec, std::uint64_t seed, std::size_t n) {
  spec.validate();
  std::vector<double> cumulative;
  double total = 0.0;
  for (const auto& [name, w] : spec.weights) {
    total += w;
    cumulative.push_back(total);
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = unit(rng) * total;
    std::size_t pick = spec.weights.size() - 1;
    for (std::size_t j = 0; j < cumulative.size(); ++j) {
      if (spec.weights[j].second > 0.0 && u < cumulative[j]) {
        pick = j;
        break;
      }
    }
    // u can round up to total; take the last positive entry.
    while (spec.weights[pick].second <= 0.0) --pick;
    out.push_back(spec.weights[pick].first);
  }
  return out;
}

const std::vector<std::string>& default_instructions(std::string_view modality, Direction direction) {
  static const std::map<std::pair<std::string, Direction>, std::vector<std::string>> pools = {
      {{"image", Direction::XToText}, {"Describe the image", "Write a caption for this picture"}},
      {{"image", Direction::TextToX}, {"Please generate an image based on the provided text", "Draw this"}},
      {{"speech", Direction::XToText}, {"Convert the speech to text", "Transcribe this audio"}},
      {{"speech", Direction::TextToX}, {"Read this text aloud", "Convert the text to speech"}},
      {{"music", Direction::XToText}, {"Describe this music", "Caption the music clip"}},
      {{"music", Direction::TextToX}, {"Compose music from this description", "Play music like this"}},
  };
  static const std::vector<std::string> generic_x = {"Describe the input"};
  static const std::vector<std::string> generic_t = {"Generate content from the text"};
  auto it = pools.find({std::string(modality), direction});
  if (it != pools.end()) return it->second;
  return direction == Direction::XToText ? generic_x : generic_t;
}

}  // namespace mmseq
