#pragma once

// Expanded vocabulary: a text block, one contiguous block per registered
// modality (each followed by its begin/end bracket tokens), and the fixed
// dialogue specials appended when the vocabulary is frozen.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace mmseq {

using TokenId = std::uint32_t;

namespace special {
inline constexpr std::string_view kPad = "<pad>";
inline constexpr std::string_view kEos = "<eos>";
inline constexpr std::string_view kEoh = "<eoh>";
inline constexpr std::string_view kHuman = "[Human]";
inline constexpr std::string_view kAssistant = "[AnyGPT]";
}  // namespace special

struct ModalityEntry {
  std::string name;
  std::uint32_t local_size = 0;
  TokenId offset = 0;
  TokenId begin_token = 0;
  TokenId end_token = 0;

  bool operator==(const ModalityEntry&) const = default;
};

enum class TokenKind { Text, Modality, Special };

struct TokenInfo {
  TokenKind kind = TokenKind::Text;
  // Modality index for Modality tokens and for bracket specials; -1 otherwise.
  int modality = -1;
  // Byte value for text, local id for modality tokens.
  std::uint32_t local = 0;
  std::string special;  // name, for Special tokens

  bool operator==(const TokenInfo&) const = default;
};

class UnifiedVocab {
 public:
  explicit UnifiedVocab(std::uint32_t text_base_size = 256);

  UnifiedVocab& register_modality(std::string_view name, std::uint32_t local_size);
  UnifiedVocab& freeze();

  bool frozen() const { return frozen_; }
  std::uint32_t text_base_size() const { return text_base_; }
  std::uint32_t total_size() const { return total_; }
  const std::vector<ModalityEntry>& entries() const { return entries_; }
  const std::map<std::string, TokenId, std::less<>>& specials() const { return specials_; }

  const ModalityEntry& modality(std::string_view name) const;
  int modality_index(std::string_view name) const;  // -1 when unknown
  TokenId special_id(std::string_view name) const;
  TokenId begin_token(std::string_view modality_name) const { return modality(modality_name).begin_token; }
  TokenId end_token(std::string_view modality_name) const { return modality(modality_name).end_token; }

  TokenId to_global(std::string_view modality_name, std::uint32_t local_id) const;
  TokenInfo to_local(TokenId global_id) const;

  // Display form used in golden renderings: text bytes verbatim, specials by
  // name, modality tokens as <abbr_local> (e.g. <sp_5>).
  std::string render(std::span<const TokenId> tokens) const;

  nlohmann::json to_json() const;
  static UnifiedVocab from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static UnifiedVocab load(const std::filesystem::path& path);

  bool operator==(const UnifiedVocab& o) const {
    return text_base_ == o.text_base_ && entries_ == o.entries_ && specials_ == o.specials_ &&
           total_ == o.total_ && frozen_ == o.frozen_;
  }

  // Two-letter tag used in bracket names: image -> im, speech -> sp, music -> mu.
  static std::string abbreviation(std::string_view name);

 private:
  void require_frozen() const;

  std::uint32_t text_base_;
  std::vector<ModalityEntry> entries_;
  std::map<std::string, TokenId, std::less<>> specials_;
  std::uint32_t total_;
  bool frozen_ = false;

  std::vector<std::string> tags_;  // bracket tag per modality
  std::map<TokenId, std::string> special_by_id_;
};

}  // namespace mmseq
