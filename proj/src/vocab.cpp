#include "mmseq/vocab.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>

#include "mmseq/error.hpp"

namespace mmseq {
namespace {

constexpr std::array<std::string_view, 5> kFixedSpecials = {
    special::kPad, special::kEos, special::kEoh, special::kHuman, special::kAssistant};

std::string begin_name(std::string_view tag) { return "<so" + std::string(tag) + ">"; }
std::string end_name(std::string_view tag) { return "<eo" + std::string(tag) + ">"; }

bool is_fixed(std::string_view name) {
  return std::find(kFixedSpecials.begin(), kFixedSpecials.end(), name) != kFixedSpecials.end();
}

}  // namespace

UnifiedVocab::UnifiedVocab(std::uint32_t text_base_size) : text_base_(text_base_size), total_(text_base_size) {
  if (text_base_size == 0) throw Error(Errc::ZeroSize, "text base size must be positive");
}

std::string UnifiedVocab::abbreviation(std::string_view name) {
  if (name == "image") return "im";
  if (name == "speech") return "sp";
  if (name == "music") return "mu";
  std::string tag(name.substr(0, 2));
  for (auto& ch : tag) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return tag;
}

UnifiedVocab& UnifiedVocab::register_modality(std::string_view name, std::uint32_t local_size) {
  if (frozen_) throw Error(Errc::AlreadyFrozen, "cannot register '" + std::string(name) + "' after freeze");
  if (name.empty()) throw Error(Errc::InvalidConfig, "modality name must be non-empty");
  if (local_size == 0) throw Error(Errc::ZeroSize, "modality '" + std::string(name) + "' has zero size");
  if (modality_index(name) >= 0) throw Error(Errc::DuplicateModality, std::string(name));

  auto taken = [&](const std::string& tag) {
    const auto b = begin_name(tag), e = end_name(tag);
    return specials_.contains(b) || specials_.contains(e) || is_fixed(b) || is_fixed(e);
  };
  std::string tag = abbreviation(name);
  if (taken(tag)) tag = std::string(name);
  if (taken(tag)) throw Error(Errc::DuplicateModality, "bracket names for '" + std::string(name) + "' collide");
  if (static_cast<std::uint64_t>(total_) + local_size + 2 > UINT32_MAX) {
    throw Error(Errc::OutOfRange, "vocabulary exceeds 32-bit id space");
  }

  ModalityEntry entry;
  entry.name = std::string(name);
  entry.local_size = local_size;
  entry.offset = total_;
  entry.begin_token = total_ + local_size;
  entry.end_token = total_ + local_size + 1;
  total_ += local_size + 2;
  specials_.emplace(begin_name(tag), entry.begin_token);
  specials_.emplace(end_name(tag), entry.end_token);
  special_by_id_.emplace(entry.begin_token, begin_name(tag));
  special_by_id_.emplace(entry.end_token, end_name(tag));
  entries_.push_back(std::move(entry));
  tags_.push_back(std::move(tag));
  return *this;
}

UnifiedVocab& UnifiedVocab::freeze() {
  if (frozen_) return *this;
  if (entries_.empty()) throw Error(Errc::EmptyVocab, "register at least one modality before freezing");
  for (auto name : kFixedSpecials) {
    specials_.emplace(std::string(name), total_);
    special_by_id_.emplace(total_, std::string(name));
    ++total_;
  }
  frozen_ = true;
  return *this;
}

void UnifiedVocab::require_frozen() const {
  if (!frozen_) throw Error(Errc::NotFrozen, "vocabulary must be frozen before lookup");
}

int UnifiedVocab::modality_index(std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

const ModalityEntry& UnifiedVocab::modality(std::string_view name) const {
  const int i = modality_index(name);
  if (i < 0) throw Error(Errc::UnknownModality, std::string(name));
  return entries_[static_cast<std::size_t>(i)];
}

TokenId UnifiedVocab::special_id(std::string_view name) const {
  auto it = specials_.find(name);
  if (it == specials_.end()) throw Error(Errc::OutOfRange, "no special token " + std::string(name));
  return it->second;
}

TokenId UnifiedVocab::to_global(std::string_view modality_name, std::uint32_t local_id) const {
  require_frozen();
  const auto& m = modality(modality_name);
  if (local_id >= m.local_size) {
    throw Error(Errc::OutOfRange, "local id " + std::to_string(local_id) + " >= " +
                                      std::to_string(m.local_size) + " for " + m.name);
  }
  return m.offset + local_id;
}

TokenInfo UnifiedVocab::to_local(TokenId id) const {
  require_frozen();
  if (id >= total_) {
    throw Error(Errc::OutOfRange, "token id " + std::to_string(id) + " >= vocabulary size " + std::to_string(total_));
  }
  TokenInfo info;
  if (id < text_base_) {
    info.kind = TokenKind::Text;
    info.local = id;
    return info;
  }
  if (auto it = special_by_id_.find(id); it != special_by_id_.end()) {
    info.kind = TokenKind::Special;
    info.special = it->second;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].begin_token == id || entries_[i].end_token == id) info.modality = static_cast<int>(i);
    }
    return info;
  }
  // Entries are laid out in increasing offset order.
  auto it = std::upper_bound(entries_.begin(), entries_.end(), id,
                             [](TokenId v, const ModalityEntry& e) { return v < e.offset; });
  if (it != entries_.begin()) {
    --it;
    if (id < it->offset + it->local_size) {
      info.kind = TokenKind::Modality;
      info.modality = static_cast<int>(it - entries_.begin());
      info.local = id - it->offset;
      return info;
    }
  }
  throw Error(Errc::OutOfRange, "token id " + std::to_string(id) + " is unassigned");
}

std::string UnifiedVocab::render(std::span<const TokenId> tokens) const {
  std::string out;
  for (TokenId id : tokens) {
    const auto info = to_local(id);
    switch (info.kind) {
      case TokenKind::Text:
        out.push_back(static_cast<char>(info.local));
        break;
      case TokenKind::Special:
        out += info.special;
        break;
      case TokenKind::Modality:
        out += "<" + tags_[static_cast<std::size_t>(info.modality)] + "_" + std::to_string(info.local) + ">";
        break;
    }
  }
  return out;
}

nlohmann::json UnifiedVocab::to_json() const {
  nlohmann::json mods = nlohmann::json::array();
  for (const auto& e : entries_) {
    mods.push_back({{"name", e.name}, {"offset", e.offset}, {"size", e.local_size},
                    {"begin", e.begin_token}, {"end", e.end_token}});
  }
  nlohmann::json specials = nlohmann::json::object();
  for (const auto& [name, id] : specials_) specials[name] = id;
  return {{"text_base", text_base_}, {"specials", specials}, {"modalities", mods}, {"total", total_}};
}

UnifiedVocab UnifiedVocab::from_json(const nlohmann::json& j) {
  try {
    UnifiedVocab v(j.at("text_base").get<std::uint32_t>());
    const auto& specials = j.at("specials");
    for (const auto& m : j.at("modalities")) {
      const auto name = m.at("name").get<std::string>();
      v.register_modality(name, m.at("size").get<std::uint32_t>());
      const auto& e = v.entries_.back();
      if (e.offset != m.at("offset").get<TokenId>() || e.begin_token != m.at("begin").get<TokenId>() ||
          e.end_token != m.at("end").get<TokenId>()) {
        throw Error(Errc::BadFormat, "manifest layout for '" + name + "' is not canonical");
      }
    }
    bool has_fixed = true;
    for (auto name : kFixedSpecials) has_fixed = has_fixed && specials.contains(std::string(name));
    if (has_fixed) v.freeze();
    if (specials.size() != v.specials_.size()) throw Error(Errc::BadFormat, "manifest special set mismatch");
    for (const auto& [name, id] : v.specials_) {
      if (!specials.contains(name) || specials.at(name).get<TokenId>() != id) {
        throw Error(Errc::BadFormat, "manifest special " + name + " mismatch");
      }
    }
    if (j.at("total").get<std::uint32_t>() != v.total_) throw Error(Errc::BadFormat, "manifest total mismatch");
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::BadFormat, std::string("vocab manifest: ") + e.what());
  }
}

void UnifiedVocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

UnifiedVocab UnifiedVocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::Io, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::BadFormat, path.string() + ": " + e.what());
  }
  return from_json(j);
}

}  // namespace mmseq
