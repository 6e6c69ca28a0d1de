#include "mmseq/stream_parser.hpp"

#include "mmseq/error.hpp"

namespace mmseq {

std::string_view violation_name(ViolationKind kind) {
  switch (kind) {
    case ViolationKind::UnmatchedBracket: return "UnmatchedBracket";
    case ViolationKind::NestedSpan: return "NestedSpan";
    case ViolationKind::WrongEndBracket: return "WrongEndBracket";
    case ViolationKind::OrphanModalityToken: return "OrphanModalityToken";
    case ViolationKind::WrongModalityToken: return "WrongModalityToken";
    case ViolationKind::OutOfVocabulary: return "OutOfVocabulary";
  }
  return "Unknown";
}

namespace {

// Walks the stream once. `on_violation` sees every problem; `keep` is set for
// tokens that belong to the recovered structure.
struct Scan {
  std::vector<Violation> violations;
  std::vector<std::uint8_t> keep;
  int open = -1;
  std::size_t open_pos = 0;
};

Scan scan(const UnifiedVocab& vocab, std::span<const TokenId> tokens) {
  if (!vocab.frozen()) throw Error(Errc::NotFrozen, "vocabulary must be frozen");
  Scan s;
  s.keep.assign(tokens.size(), 1);
  const auto& entries = vocab.entries();
  auto flag = [&](ViolationKind kind, std::size_t pos, std::string detail) {
    s.violations.push_back({kind, pos, std::move(detail)});
    s.keep[pos] = 0;
  };
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const TokenId id = tokens[i];
    if (id >= vocab.total_size()) {
      flag(ViolationKind::OutOfVocabulary, i, "id " + std::to_string(id));
      continue;
    }
    const TokenInfo info = vocab.to_local(id);
    switch (info.kind) {
      case TokenKind::Special: {
        if (info.modality < 0) {
          if (s.open >= 0) flag(ViolationKind::WrongModalityToken, i, info.special + " inside " + entries[s.open].name + " span");
          break;
        }
        const auto& entry = entries[static_cast<std::size_t>(info.modality)];
        if (id == entry.begin_token) {
          if (s.open >= 0) {
            flag(ViolationKind::NestedSpan, i, info.special + " inside " + entries[s.open].name + " span");
          } else {
            s.open = info.modality;
            s.open_pos = i;
          }
        } else if (s.open < 0) {
          flag(ViolationKind::UnmatchedBracket, i, info.special + " without an open span");
        } else if (s.open != info.modality) {
          flag(ViolationKind::WrongEndBracket, i, info.special + " closes a " + entries[s.open].name + " span");
        } else {
          s.open = -1;
        }
        break;
      }
      case TokenKind::Text:
        if (s.open >= 0) flag(ViolationKind::WrongModalityToken, i, "text inside " + entries[s.open].name + " span");
        break;
      case TokenKind::Modality:
        if (s.open < 0) {
          flag(ViolationKind::OrphanModalityToken, i, entries[info.modality].name + " token outside a span");
        } else if (s.open != info.modality) {
          flag(ViolationKind::WrongModalityToken, i,
               entries[info.modality].name + " token inside " + entries[s.open].name + " span");
        }
        break;
    }
  }
  if (s.open >= 0) {
    s.violations.push_back({ViolationKind::UnmatchedBracket, s.open_pos, entries[s.open].name + " span never closed"});
  }
  return s;
}

}  // namespace

std::vector<Violation> validate(const UnifiedVocab& vocab, std::span<const TokenId> tokens) {
  return scan(vocab, tokens).violations;
}

std::vector<Segment> parse_segments(const UnifiedVocab& vocab, std::span<const TokenId> tokens, ParseMode mode) {
  Scan s = scan(vocab, tokens);
  if (mode == ParseMode::Strict && !s.violations.empty()) {
    const auto& v = s.violations.front();
    throw Error(Errc::MalformedStream, std::to_string(s.violations.size()) + " violation(s), first: " +
                                           std::string(violation_name(v.kind)) + " at " + std::to_string(v.position) +
                                           " (" + v.detail + ")");
  }
  const auto& entries = vocab.entries();
  std::vector<Segment> out;
  Segment* media = nullptr;
  std::size_t last_kept = static_cast<std::size_t>(-1);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!s.keep[i]) continue;
    const TokenInfo info = vocab.to_local(tokens[i]);
    const bool contiguous = last_kept + 1 == i;
    last_kept = i;
    if (media) {
      if (info.kind == TokenKind::Modality) {
        media->payload.push_back(info.local);
        media->end = i + 1;
      } else {
        // The scan only keeps the matching end bracket here.
        media->end = i + 1;
        media = nullptr;
      }
      continue;
    }
    if (info.kind == TokenKind::Text) {
      if (contiguous && !out.empty() && out.back().kind == SegmentKind::Text && out.back().end == i) {
        out.back().end = i + 1;
      } else {
        out.push_back({SegmentKind::Text, {}, i, i + 1, {}});
      }
    } else if (info.kind == TokenKind::Special && info.modality >= 0) {
      out.push_back({SegmentKind::Modality, entries[info.modality].name, i, i + 1, {}});
      media = &out.back();
    } else if (info.kind == TokenKind::Special) {
      out.push_back({SegmentKind::Special, info.special, i, i + 1, {}});
    }
  }
  return out;
}

Frames detokenize(const Segment& segment, const CodecMap& codecs, const SpeechRefinement* refiner) {
  if (segment.kind != SegmentKind::Modality) throw Error(Errc::InvalidConfig, "only modality segments can be detokenized");
  auto it = codecs.find(segment.name);
  if (it == codecs.end() || it->second.books == nullptr) {
    throw Error(Errc::MissingCodebooks, "no codebooks for " + segment.name);
  }
  const auto& layout = it->second.layout;
  const CodebookSet& books = *it->second.books;
  const CodeMatrix codes = layout.from_local_ids(segment.payload);
  switch (layout.scheme) {
    case MediaScheme::Single:
    case MediaScheme::Flattened:
      return decode(codes, books);
    case MediaScheme::SemanticOnly: {
      if (refiner && refiner->predictor && books.layers() > 1) {
        return decode(refine(codes, *refiner->predictor, refiner->schedule, books.layers()), books);
      }
      CodeMatrix full(codes.t, books.layers());
      for (std::size_t t = 0; t < codes.t; ++t) full.at(t, 0) = codes.at(t, 0);
      return decode(full, books, 1);
    }
  }
  return {};
}

nlohmann::json segments_to_json(const std::vector<Segment>& segments) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : segments) {
    out.push_back({{"kind", s.kind == SegmentKind::Text ? std::string("text") : s.name},
                   {"start", s.start},
                   {"end", s.end},
                   {"payload", s.payload}});
  }
  return out;
}

}  // namespace mmseq
