#include "mmseq/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "mmseq/error.hpp"
#include "mmseq/refiner.hpp"
#include "mmseq/stream_parser.hpp"
#include "mmseq/synth.hpp"

namespace mmseq::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path resolve(const fs::path& base, const json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return {};
  const fs::path p = j[key].get<std::string>();
  if (p.empty() || p.is_absolute()) return p;
  return base / p;
}

void require_file(const fs::path& p, std::string_view what) {
  if (p.empty()) throw Error(Errc::InvalidConfig, std::string(what) + " path is not configured");
  if (!fs::exists(p)) throw Error(Errc::InvalidConfig, std::string(what) + " not found: " + p.string());
}

json read_json_file(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw Error(Errc::Io, "cannot open " + p.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw Error(Errc::BadFormat, p.string() + ": " + e.what());
  }
}

std::vector<json> read_jsonl(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw Error(Errc::Io, "cannot open " + p.string());
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw Error(Errc::BadFormat, p.string() + ":" + std::to_string(n) + ": invalid JSON");
    out.push_back(std::move(j));
  }
  return out;
}

void write_text(const fs::path& p, const std::string& body) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Errc::Io, "cannot write " + p.string());
  f << body;
  if (!f) throw Error(Errc::Io, "write failed: " + p.string());
}

Direction parse_direction(const std::string& s) {
  if (s == "x_to_text") return Direction::XToText;
  if (s == "text_to_x") return Direction::TextToX;
  throw Error(Errc::BadFormat, "direction must be x_to_text or text_to_x, got '" + s + "'");
}

MediaScheme default_scheme(std::string_view name) {
  if (name == "speech") return MediaScheme::SemanticOnly;
  if (name == "music") return MediaScheme::Flattened;
  return MediaScheme::Single;
}

ModalitySettings parse_modality(const json& j, const fs::path& base, std::uint64_t seed) {
  ModalitySettings m;
  m.name = j.at("name").get<std::string>();
  const std::uint32_t dim = j.value("frame_dim", 8u);
  const std::string preset = j.value("preset", std::string());
  if (preset == "image") {
    m.rvq = RVQConfig::image_preset(dim, seed);
  } else if (preset == "speech") {
    m.rvq = RVQConfig::speech_preset(dim, seed);
  } else if (preset == "music") {
    m.rvq = RVQConfig::music_preset(dim, j.value("codebook_size", 1024u), seed);
  } else if (!preset.empty()) {
    throw Error(Errc::InvalidConfig, "unknown preset '" + preset + "'");
  } else {
    m.rvq.frame_dim = dim;
    m.rvq.seed = seed;
  }
  m.rvq.num_layers = j.value("num_layers", m.rvq.num_layers);
  m.rvq.codebook_size = j.value("codebook_size", m.rvq.codebook_size);
  m.rvq.seed = j.value("seed", m.rvq.seed);
  m.rvq.max_iterations = j.value("max_iterations", m.rvq.max_iterations);
  if (j.contains("frame_rate")) {
    const auto& fr = j["frame_rate"];
    m.rvq.frame_rate = fr.is_array() ? Rational{fr.at(0).get<std::uint32_t>(), fr.at(1).get<std::uint32_t>()}
                                     : Rational{fr.get<std::uint32_t>(), 1};
  }
  m.rvq.validate();

  const std::string scheme = j.value("scheme", std::string());
  MediaScheme s = default_scheme(m.name);
  if (scheme == "single") s = MediaScheme::Single;
  if (scheme == "semantic_only") s = MediaScheme::SemanticOnly;
  if (scheme == "flattened") s = MediaScheme::Flattened;
  const FlattenMode fm = j.value("flatten", std::string("layer_offsets")) == "shared" ? FlattenMode::Shared : FlattenMode::LayerOffsets;
  m.layout = MediaLayout{m.name, s, m.rvq.num_layers, m.rvq.codebook_size, s == MediaScheme::Flattened ? fm : FlattenMode::Shared};
  if (s == MediaScheme::Single && m.rvq.num_layers != 1) throw Error(Errc::InvalidConfig, m.name + ": single-layer scheme needs num_layers 1");
  m.codebooks = resolve(base, j, "codebooks");
  m.frames = resolve(base, j, "frames");
  return m;
}

std::string text_of(const UnifiedVocab& vocab, std::span<const TokenId> tokens) {
  std::string s;
  for (TokenId t : tokens) {
    if (t < vocab.text_base_size()) s.push_back(static_cast<char>(t));
  }
  return s;
}

// Lazily loaded codebooks, keyed by modality.
class CodebookCache {
 public:
  explicit CodebookCache(const PipelineConfig& config) : config_(config) {}

  const CodebookSet* find(std::string_view modality) {
    auto it = books_.find(std::string(modality));
    if (it != books_.end()) return &it->second;
    const auto& m = config_.modality(modality);
    if (m.codebooks.empty() || !fs::exists(m.codebooks)) return nullptr;
    CodebookSet b = load_codebooks(m.codebooks);
    if (b.layers() != m.rvq.num_layers || b.entries() != m.rvq.codebook_size) {
      throw Error(Errc::DimensionMismatch, modality_str(modality) + " codebooks do not match the configured geometry");
    }
    return &books_.emplace(std::string(modality), std::move(b)).first->second;
  }

  const CodebookSet& get(std::string_view modality) {
    const auto* b = find(modality);
    if (!b) throw Error(Errc::MissingCodebooks, "no codebooks for " + modality_str(modality) + "; run train-tokenizer first");
    return *b;
  }

 private:
  static std::string modality_str(std::string_view m) { return std::string(m); }
  const PipelineConfig& config_;
  std::map<std::string, CodebookSet> books_;
};

// Local ids for the media carried by `holder` ("codes" or "frames").
std::vector<std::uint32_t> media_ids(const json& holder, const ModalitySettings& m, CodebookCache& books) {
  CodeMatrix codes;
  if (holder.contains("codes")) {
    codes = codes_from_json(holder["codes"]);
    for (auto c : codes.codes) {
      if (c >= m.rvq.codebook_size) {
        throw Error(Errc::IndexOutOfRange, "code " + std::to_string(c) + " outside " + m.name + " codebook of " +
                                               std::to_string(m.rvq.codebook_size));
      }
    }
    if (codes.q > m.rvq.num_layers) throw Error(Errc::DimensionMismatch, m.name + " codes have too many layers");
  } else if (holder.contains("frames")) {
    codes = encode(frames_from_json(holder["frames"]), books.get(m.name));
  } else {
    throw Error(Errc::BadFormat, "media needs \"codes\" or \"frames\"");
  }
  if (codes.t == 0) throw Error(Errc::BadFormat, "empty " + m.name + " media");
  return m.layout.to_local_ids(codes);
}

struct SampleBuilder {
  const PipelineConfig& config;
  const UnifiedVocab& vocab;
  CodebookCache& books;
  std::mt19937_64 rng;

  // Returns (dataset name, sample).
  std::pair<std::string, TokenSequence> build(const json& r) {
    if (r.contains("chunks")) {
      std::vector<DocumentChunk> doc;
      std::string first_media;
      for (const auto& c : r["chunks"]) {
        if (c.contains("modality")) {
          const auto name = c["modality"].get<std::string>();
          if (first_media.empty()) first_media = name;
          doc.push_back(DocumentChunk::of_media(name, media_ids(c, config.modality(name), books)));
        } else {
          doc.push_back(DocumentChunk::of_text(c.at("text").get<std::string>()));
        }
      }
      return {r.value("dataset", "interleaved_" + first_media + "_text"), build_interleaved_sample(vocab, doc)};
    }
    if (!r.contains("modality")) {
      const std::vector<DocumentChunk> doc = {DocumentChunk::of_text(r.at("text").get<std::string>())};
      return {r.value("dataset", std::string("text")), build_interleaved_sample(vocab, doc)};
    }
    const auto modality = r["modality"].get<std::string>();
    const auto& m = config.modality(modality);
    const Direction dir = parse_direction(r.value("direction", std::string("x_to_text")));
    const auto caption = r.at("text").get<std::string>();
    if (caption.empty()) throw Error(Errc::BadFormat, "empty text");
    std::string instruction = r.value("instruction", std::string());
    if (instruction.empty()) {
      const auto& pool = default_instructions(modality, dir);
      instruction = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    }
    const auto ids = media_ids(r, m, books);
    SampleOptions opts;
    opts.mask_human_turn = config.dataset.mask_human_turn;
    return {r.value("dataset", modality + "_text"), build_pair_sample(vocab, instruction, modality, ids, caption, dir, opts)};
  }
};

std::string bucket_label(std::size_t n) {
  if (n == 0) return "0";
  std::size_t lo = 1;
  while (lo * 2 <= n) lo *= 2;
  return std::to_string(lo) + "-" + std::to_string(lo * 2 - 1);
}

json token_histogram(const UnifiedVocab& vocab, std::span<const TokenSequence> samples) {
  struct Acc {
    std::size_t samples = 0, tokens = 0;
    std::map<std::string, std::size_t> buckets;
  };
  std::map<std::string, Acc> acc;
  for (const auto& s : samples) {
    std::map<std::string, std::size_t> per;
    for (TokenId t : s.tokens) {
      const auto info = vocab.to_local(t);
      if (info.kind == TokenKind::Text) {
        ++per["text"];
      } else if (info.modality >= 0) {
        ++per[vocab.entries()[static_cast<std::size_t>(info.modality)].name];
      } else {
        ++per["special"];
      }
    }
    for (const auto& [name, n] : per) {
      auto& a = acc[name];
      ++a.samples;
      a.tokens += n;
      ++a.buckets[bucket_label(n)];
    }
  }
  json out = json::object();
  for (const auto& [name, a] : acc) {
    out[name] = {{"samples", a.samples}, {"tokens", a.tokens}, {"per_sample_buckets", a.buckets}};
  }
  return out;
}

std::vector<TokenSequence> build_samples(const PipelineConfig& config, const UnifiedVocab& vocab, const fs::path& records,
                                         BuildReport& report, std::vector<std::string>* dataset_names) {
  CodebookCache books(config);
  SampleBuilder builder{config, vocab, books, std::mt19937_64(config.seed)};
  std::vector<TokenSequence> samples;
  std::ifstream f(records);
  if (!f) throw Error(Errc::Io, "cannot open " + records.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++report.records;
    try {
      const auto r = json::parse(line);
      auto [name, sample] = builder.build(r);
      if (sample.size() > config.dataset.max_len) {
        throw Error(Errc::SampleTooLong, std::to_string(sample.size()) + " tokens exceed max_len " + std::to_string(config.dataset.max_len));
      }
      if (dataset_names) dataset_names->push_back(name);
      samples.push_back(std::move(sample));
    } catch (const std::exception& e) {
      ++report.skipped;
      spdlog::warn("{}:{}: skipping record: {}", records.string(), lineno, e.what());
    }
  }
  return samples;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

PipelineConfig PipelineConfig::from_json(const json& j, const fs::path& base_dir) {
  PipelineConfig c;
  c.base_dir = base_dir;
  try {
    c.seed = j.value("seed", c.seed);
    c.text_base = j.value("text_base", c.text_base);
    for (const auto& m : j.value("modalities", json::array())) c.modalities.push_back(parse_modality(m, base_dir, c.seed));

    const auto p = j.value("paths", json::object());
    c.paths.vocab = resolve(base_dir, p, "vocab");
    c.paths.records = resolve(base_dir, p, "records");
    c.paths.heldout_records = resolve(base_dir, p, "heldout_records");
    c.paths.dataset = resolve(base_dir, p, "dataset");
    c.paths.heldout = resolve(base_dir, p, "heldout");
    c.paths.checkpoint = resolve(base_dir, p, "checkpoint");
    c.paths.init_checkpoint = resolve(base_dir, p, "init_checkpoint");
    c.paths.train_log = resolve(base_dir, p, "train_log");
    c.paths.prompts = resolve(base_dir, p, "prompts");
    c.paths.generate_out = resolve(base_dir, p, "generate_out");
    c.paths.eval_report = resolve(base_dir, p, "eval_report");

    const auto d = j.value("dataset", json::object());
    c.dataset.max_len = d.value("max_len", c.dataset.max_len);
    c.dataset.pad = d.value("pad", c.dataset.pad);
    c.dataset.mask_human_turn = d.value("mask_human_turn", c.dataset.mask_human_turn);
    c.dataset.num_samples = d.value("num_samples", c.dataset.num_samples);
    if (d.contains("mixture")) {
      c.dataset.mixture.weights.clear();
      const auto& mx = d["mixture"];
      if (mx.is_array()) {
        for (const auto& e : mx) c.dataset.mixture.weights.emplace_back(e.at(0).get<std::string>(), e.at(1).get<double>());
      } else {
        for (const auto& [k, v] : mx.items()) c.dataset.mixture.weights.emplace_back(k, v.get<double>());
      }
      c.dataset.mixture.validate();
    }

    const auto m = j.value("model", json::object());
    c.model.dim = m.value("dim", c.model.dim);
    c.model.num_layers = m.value("num_layers", c.model.num_layers);
    c.model.num_heads = m.value("num_heads", c.model.num_heads);
    c.model.max_seq_len = m.value("max_seq_len", c.model.max_seq_len);
    c.model.init_std = m.value("init_std", c.model.init_std);
    c.model.seed = m.value("seed", c.seed);

    const auto t = j.value("train", json::object());
    c.train.peak_lr = t.value("peak_lr", c.train.peak_lr);
    c.train.warmup_ratio = t.value("warmup_ratio", c.train.warmup_ratio);
    c.train.batch_size = t.value("batch_size", c.train.batch_size);
    c.train.steps = t.value("steps", c.train.steps);
    c.train.clip_norm = t.value("clip_norm", c.train.clip_norm);
    c.train.seed = t.value("seed", c.seed);
    c.train.validate();

    for (const char* target : {"text", "image", "speech", "music"}) {
      DecodeStrategy base = DecodeStrategy::for_target(target);
      base.seed = c.seed;
      c.decode[target] = base;
    }
    const json decode = j.value("decode", json::object());
    for (const auto& [k, v] : decode.items()) {
      const auto base = c.decode.contains(k) ? c.decode[k] : DecodeStrategy{};
      c.decode[k] = DecodeStrategy::from_json(v, base);
    }

    c.refine_iterations = j.value("refiner", json::object()).value("iterations", c.refine_iterations);
    c.eval_generations = j.value("eval", json::object()).value("generations", c.eval_generations);
    c.synth = j.value("synth", json::object());
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidConfig, std::string("config: ") + e.what());
  }
  for (const auto& mod : c.modalities) {
    if (!c.decode.contains(mod.name)) throw Error(Errc::InvalidConfig, "no decoding strategy for " + mod.name);
  }
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw Error(Errc::InvalidConfig, "config not found: " + path.string());
  const json j = [&] {
    try {
      return read_json_file(path);
    } catch (const Error& e) {
      throw Error(Errc::InvalidConfig, e.what());
    }
  }();
  return from_json(j, fs::absolute(path).parent_path());
}

void PipelineConfig::override_seed(std::uint64_t s) {
  seed = s;
  for (auto& m : modalities) m.rvq.seed = s;
  model.seed = s;
  train.seed = s;
  for (auto& [name, d] : decode) d.seed = s;
  synth["seed"] = s;
}

const ModalitySettings& PipelineConfig::modality(std::string_view name) const {
  for (const auto& m : modalities) {
    if (m.name == name) return m;
  }
  throw Error(Errc::UnknownModality, "modality '" + std::string(name) + "' is not configured");
}

const DecodeStrategy& PipelineConfig::strategy_for(std::string_view target) const {
  auto it = decode.find(target);
  if (it == decode.end()) throw Error(Errc::InvalidConfig, "no decoding strategy for '" + std::string(target) + "'");
  return it->second;
}

UnifiedVocab PipelineConfig::build_vocab() const {
  UnifiedVocab v(text_base);
  for (const auto& m : modalities) v.register_modality(m.name, m.layout.vocab_size());
  v.freeze();
  return v;
}

// ---------------------------------------------------------------------------
// Sequence files

std::vector<TokenSequence> read_sequences(const fs::path& path) {
  std::vector<TokenSequence> out;
  for (const auto& j : read_jsonl(path)) {
    TokenSequence s;
    s.tokens = j.at("tokens").get<std::vector<TokenId>>();
    s.loss_mask = j.at("loss_mask").get<std::vector<std::uint8_t>>();
    if (s.tokens.size() != s.loss_mask.size()) throw Error(Errc::BadFormat, "tokens and loss_mask differ in length");
    out.push_back(std::move(s));
  }
  return out;
}

void write_sequences(const fs::path& path, const std::vector<TokenSequence>& seqs) {
  std::string body;
  for (const auto& s : seqs) {
    json j = {{"tokens", s.tokens}, {"loss_mask", s.loss_mask}, {"segments", segments_to_json(s.segments)}};
    body += j.dump() + "\n";
  }
  write_text(path, body);
}

// ---------------------------------------------------------------------------
// Commands

TokenizerResult cmd_train_tokenizer(const PipelineConfig& config, std::string_view modality) {
  const auto& m = config.modality(modality);
  require_file(m.frames, std::string(modality) + " frames");
  if (m.codebooks.empty()) throw Error(Errc::InvalidConfig, std::string(modality) + " codebooks path is not configured");
  const Frames frames = frames_from_json(read_json_file(m.frames));
  spdlog::info("training {} tokenizer: {} frames, D={}, Q={}, K={}", modality, frames.rows(), m.rvq.frame_dim,
               m.rvq.num_layers, m.rvq.codebook_size);
  const CodebookSet books = train_codebooks(frames, m.rvq);
  if (m.codebooks.has_parent_path()) fs::create_directories(m.codebooks.parent_path());
  save_codebooks(m.codebooks, books);
  return {m.codebooks, m.rvq, layer_error_curve(frames, books)};
}

json BuildReport::to_json() const {
  return {{"records", records},
          {"skipped", skipped},
          {"heldout_records", heldout_records},
          {"heldout_skipped", heldout_skipped},
          {"samples", samples},
          {"sequences", sequences},
          {"sample_tokens", sample_tokens},
          {"loss_tokens", loss_tokens},
          {"samples_per_dataset", samples_per_dataset},
          {"histogram", histogram}};
}

BuildReport cmd_build_dataset(const PipelineConfig& config) {
  require_file(config.paths.records, "records");
  if (config.paths.dataset.empty()) throw Error(Errc::InvalidConfig, "dataset output path is not configured");
  const UnifiedVocab vocab = config.build_vocab();
  if (!config.paths.vocab.empty()) {
    if (config.paths.vocab.has_parent_path()) fs::create_directories(config.paths.vocab.parent_path());
    vocab.save(config.paths.vocab);
  }

  BuildReport report;
  std::vector<std::string> names;
  std::vector<TokenSequence> pool = build_samples(config, vocab, config.paths.records, report, &names);

  std::vector<TokenSequence> samples;
  if (config.dataset.num_samples == 0) {
    samples = std::move(pool);
    for (const auto& n : names) ++report.samples_per_dataset[n];
  } else {
    std::map<std::string, std::vector<std::size_t>> by_name;
    for (std::size_t i = 0; i < names.size(); ++i) by_name[names[i]].push_back(i);
    MixtureSpec available;
    for (const auto& [name, w] : config.dataset.mixture.weights) {
      if (by_name.contains(name)) {
        available.weights.emplace_back(name, w);
      } else if (w > 0.0) {
        spdlog::warn("mixture dataset '{}' has no records; its weight is dropped", name);
      }
    }
    std::map<std::string, std::size_t> cursor;
    for (const auto& name : sample_mixture(available, config.seed, config.dataset.num_samples)) {
      const auto& idx = by_name[name];
      samples.push_back(pool[idx[cursor[name]++ % idx.size()]]);
      ++report.samples_per_dataset[name];
    }
  }
  report.samples = samples.size();
  for (const auto& s : samples) report.sample_tokens += s.size();
  report.histogram = token_histogram(vocab, samples);

  std::optional<TokenId> pad;
  if (config.dataset.pad) pad = vocab.special_id(special::kPad);
  const auto packed = pack(samples, config.dataset.max_len, pad);
  report.sequences = packed.size();
  for (const auto& s : packed) {
    report.loss_tokens += static_cast<std::size_t>(std::count(s.loss_mask.begin(), s.loss_mask.end(), 1));
    const auto violations = validate(vocab, s.tokens);
    if (!violations.empty()) {
      throw Error(Errc::MalformedStream, "packed sequence fails validation: " + violations.front().detail);
    }
  }
  write_sequences(config.paths.dataset, packed);

  if (!config.paths.heldout_records.empty() && fs::exists(config.paths.heldout_records) && !config.paths.heldout.empty()) {
    BuildReport held;
    const auto held_samples = build_samples(config, vocab, config.paths.heldout_records, held, nullptr);
    write_sequences(config.paths.heldout, pack(held_samples, config.dataset.max_len, pad));
    report.heldout_records = held.records;
    report.heldout_skipped = held.skipped;
  }
  if (report.skipped + report.heldout_skipped > 0) {
    spdlog::warn("{} record(s) skipped, {} held-out", report.skipped, report.heldout_skipped);
  }
  return report;
}

TrainReport cmd_train(const PipelineConfig& config) {
  require_file(config.paths.dataset, "dataset");
  require_file(config.paths.vocab, "vocab manifest");
  if (config.paths.checkpoint.empty()) throw Error(Errc::InvalidConfig, "checkpoint path is not configured");
  const UnifiedVocab vocab = UnifiedVocab::load(config.paths.vocab);
  const auto data = read_sequences(config.paths.dataset);
  if (data.empty()) throw Error(Errc::InvalidConfig, "dataset is empty");

  ModelParams params;
  if (!config.paths.init_checkpoint.empty()) {
    require_file(config.paths.init_checkpoint, "init checkpoint");
    params = load_checkpoint(config.paths.init_checkpoint);
    if (params.config.vocab_size < vocab.total_size()) {
      spdlog::info("expanding vocabulary {} -> {}", params.config.vocab_size, vocab.total_size());
      params = expand_vocab(params, vocab.total_size(), config.model.seed);
    } else if (params.config.vocab_size > vocab.total_size()) {
      throw Error(Errc::ShrinkNotAllowed, "checkpoint vocabulary is larger than the manifest");
    }
  } else {
    ModelConfig mc = config.model;
    mc.vocab_size = vocab.total_size();
    params = init_model(mc);
  }

  const TrainConfig& tc = config.train;
  AdamState adam = AdamState::for_params(params);
  std::mt19937_64 rng(tc.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::size_t bs = std::min(tc.batch_size, data.size());

  std::string log;
  TrainReport report;
  report.steps = tc.steps;
  for (std::size_t step = 0; step < tc.steps; ++step) {
    std::vector<TokenSequence> batch;
    while (batch.size() < bs) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(data[order[cursor++]]);
    }
    const StepResult r = train_step(params, adam, batch, tc, step);
    if (step == 0) report.first_loss = r.loss;
    report.final_loss = r.loss;
    log += json{{"step", step}, {"lr", r.lr}, {"loss", r.loss}, {"grad_norm", r.grad_norm}}.dump() + "\n";
    if (step % 50 == 0 || step + 1 == tc.steps) spdlog::info("step {} loss {:.4f} lr {:.2e}", step, r.loss, r.lr);
  }
  report.heldin_loss = loss_and_grad(params, data, nullptr);
  if (config.paths.checkpoint.has_parent_path()) fs::create_directories(config.paths.checkpoint.parent_path());
  save_checkpoint(config.paths.checkpoint, params);
  if (!config.paths.train_log.empty()) write_text(config.paths.train_log, log);
  report.checkpoint = config.paths.checkpoint;
  return report;
}

GenerateReport cmd_generate(const PipelineConfig& config, const fs::path& prompts_path, std::size_t count,
                            const fs::path& out_dir_arg) {
  require_file(prompts_path, "prompt file");
  require_file(config.paths.vocab, "vocab manifest");
  require_file(config.paths.checkpoint, "checkpoint");
  const UnifiedVocab vocab = UnifiedVocab::load(config.paths.vocab);
  const ModelParams params = load_checkpoint(config.paths.checkpoint);
  if (params.config.vocab_size != vocab.total_size()) {
    throw Error(Errc::DimensionMismatch, "checkpoint vocabulary does not match the manifest");
  }
  const auto prompts = read_jsonl(prompts_path);
  if (prompts.empty()) throw Error(Errc::InvalidConfig, "prompt file is empty");
  const fs::path out_dir = out_dir_arg.empty() ? config.paths.generate_out : out_dir_arg;
  if (out_dir.empty()) throw Error(Errc::InvalidConfig, "generate_out path is not configured");
  fs::create_directories(out_dir);

  CodebookCache books(config);
  CodecMap codecs;
  for (const auto& m : config.modalities) {
    if (const auto* b = books.find(m.name)) codecs[m.name] = ModalityCodec{m.layout, b};
  }

  // Speech refiner fitted on the tokenizer's own training frames.
  std::unique_ptr<ConditionalCodePredictor> predictor;
  std::optional<SpeechRefinement> refinement;
  for (const auto& m : config.modalities) {
    if (m.layout.scheme != MediaScheme::SemanticOnly || m.rvq.num_layers < 2) continue;
    const auto* b = books.find(m.name);
    if (!b || m.frames.empty() || !fs::exists(m.frames)) continue;
    const CodeMatrix all = encode(frames_from_json(read_json_file(m.frames)), *b);
    std::vector<CodeMatrix> utts;
    for (std::size_t start = 0; start < all.t; start += 50) {
      const std::size_t t = std::min<std::size_t>(50, all.t - start);
      CodeMatrix u(t, all.q);
      std::copy_n(all.codes.begin() + static_cast<std::ptrdiff_t>(start * all.q), t * all.q, u.codes.begin());
      utts.push_back(std::move(u));
    }
    predictor = std::make_unique<ConditionalCodePredictor>(m.rvq.codebook_size, m.rvq.num_layers);
    predictor->fit(utts);
    refinement = SpeechRefinement{predictor.get(), RefineSchedule::cosine(config.refine_iterations)};
  }

  if (count == 0) count = prompts.size();
  GenerateReport report;
  std::size_t valid = 0;
  std::string lines;
  for (std::size_t i = 0; i < count; ++i) {
    const json& p = prompts[i % prompts.size()];
    const std::string id = p.value("id", "p" + std::to_string(i % prompts.size()));
    const std::string target = p.value("target", std::string("text"));
    json rec = {{"index", i}, {"id", id}, {"target", target}};
    try {
      TokenSequence prompt;
      const std::string instruction = p.at("instruction").get<std::string>();
      if (target == "text") {
        const auto modality = p.at("modality").get<std::string>();
        const auto ids = media_ids(p, config.modality(modality), books);
        prompt = build_pair_prompt(vocab, instruction, modality, ids, {}, Direction::XToText);
      } else {
        (void)config.modality(target);
        prompt = build_pair_prompt(vocab, instruction, target, {}, p.at("text").get<std::string>(), Direction::TextToX);
      }
      DecodeStrategy strategy = config.strategy_for(target);
      strategy.seed += i;
      json trace = json::array();
      const auto out = generate(params, vocab, prompt.tokens, strategy, [&](const DecodeTraceStep& s) {
        trace.push_back(s.to_json());
        spdlog::debug("decode {} step {}: mode={} top_p={} penalty={} penalized={} support={} token={}", id, s.step,
                      s.mode == DecodeMode::Beam ? "beam" : "sample", s.top_p, s.repetition_penalty, s.penalized,
                      s.support_size, s.token);
      });

      std::vector<TokenId> stream = prompt.tokens;
      stream.insert(stream.end(), out.begin(), out.end());
      const auto violations = validate(vocab, stream);
      json jv = json::array();
      for (const auto& v : violations) {
        jv.push_back({{"kind", violation_name(v.kind)}, {"position", v.position}, {"detail", v.detail}});
      }
      const auto segments = parse_segments(vocab, out, ParseMode::Salvage);
      json payloads = json::array();
      std::size_t k = 0;
      for (const auto& seg : segments) {
        if (seg.kind != SegmentKind::Modality) continue;
        json pj = {{"modality", seg.name}, {"tokens", seg.payload.size()}};
        try {
          const Frames f = detokenize(seg, codecs, refinement ? &*refinement : nullptr);
          const fs::path fp = out_dir / (id + "." + std::to_string(i) + "." + std::to_string(k++) + "." + seg.name + ".frames.json");
          write_text(fp, frames_to_json(f).dump());
          pj["frames"] = f.rows();
          pj["dim"] = f.dim;
          pj["path"] = fp.filename().string();
        } catch (const Error& e) {
          pj["error"] = e.what();
        }
        payloads.push_back(std::move(pj));
      }
      rec["strategy"] = strategy.to_json();
      rec["tokens"] = out;
      rec["rendered"] = vocab.render(out);
      rec["text"] = text_of(vocab, out);
      rec["valid"] = violations.empty();
      rec["violations"] = std::move(jv);
      rec["segments"] = segments_to_json(segments);
      rec["payloads"] = std::move(payloads);
      rec["trace"] = std::move(trace);
      if (violations.empty()) ++valid;
    } catch (const Error& e) {
      if (e.code() == Errc::InvalidConfig || e.code() == Errc::UnknownModality) throw;
      rec["valid"] = false;
      rec["error"] = e.what();
      spdlog::warn("generation {} ({}) failed: {}", i, id, e.what());
    } catch (const json::exception& e) {
      throw Error(Errc::InvalidConfig, "prompt " + id + ": " + e.what());
    }
    // Sampled bytes need not be valid UTF-8.
    lines += rec.dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
    report.results.push_back(std::move(rec));
  }
  write_text(out_dir / "generations.jsonl", lines);
  report.validity_rate = static_cast<double>(valid) / static_cast<double>(count);
  return report;
}

json cmd_synth(const PipelineConfig& config) {
  json sj = config.synth;
  if (!sj.contains("seed")) sj["seed"] = config.seed;
  auto sc = synth::SynthConfig::from_json(sj);
  if (sc.output_dir.is_relative()) sc.output_dir = config.base_dir / sc.output_dir;
  const auto chat = synth::make_chat_client(sc.chat, sc.seed);
  const auto image = synth::make_media_client(synth::MediaKind::Image, sc.image, sc.seed);
  const auto music = synth::make_media_client(synth::MediaKind::Music, sc.music, sc.seed);
  const auto speech = synth::make_media_client(synth::MediaKind::Speech, sc.speech, sc.seed);
  const synth::SynthClients clients{chat.get(), {image.get(), music.get(), speech.get()}};
  return synth::run_synthesis(sc, clients).to_json();
}

json cmd_eval(const PipelineConfig& config) {
  json report = {{"rvq", json::object()}};
  CodebookCache books(config);

  for (const auto& m : config.modalities) {
    const auto* b = books.find(m.name);
    if (!b || m.frames.empty() || !fs::exists(m.frames)) {
      report["rvq"][m.name] = {{"available", false}};
      continue;
    }
    const auto curve = layer_error_curve(frames_from_json(read_json_file(m.frames)), *b);
    bool monotone = true;
    for (std::size_t i = 1; i < curve.size(); ++i) monotone = monotone && curve[i] <= curve[i - 1];
    report["rvq"][m.name] = {{"available", true}, {"layer_errors", curve}, {"non_increasing", monotone}};
  }

  // Language model.
  if (!config.paths.checkpoint.empty() && fs::exists(config.paths.checkpoint)) {
    const ModelParams params = load_checkpoint(config.paths.checkpoint);
    fs::path held = config.paths.heldout;
    if (held.empty() || !fs::exists(held)) held = config.paths.dataset;
    if (!held.empty() && fs::exists(held)) {
      const auto seqs = read_sequences(held);
      const double loss = loss_and_grad(params, seqs, nullptr);
      report["lm"] = {{"data", held.filename().string()}, {"loss", loss}, {"perplexity", std::exp(loss)}};
    }
    if (!config.paths.prompts.empty() && fs::exists(config.paths.prompts)) {
      const auto gen = cmd_generate(config, config.paths.prompts, config.eval_generations,
                                    (config.paths.generate_out.empty() ? config.base_dir / "eval_generations"
                                                                       : config.paths.generate_out / "eval"));
      report["validity"] = {{"generations", gen.results.size()}, {"rate", gen.validity_rate}};
    }
  } else {
    report["lm"] = {{"available", false}};
  }

  // Refiner oracle exactness on a seeded random target.
  {
    std::size_t q = 8;
    std::uint32_t k = 1024;
    for (const auto& m : config.modalities) {
      if (m.layout.scheme == MediaScheme::SemanticOnly) {
        q = m.rvq.num_layers;
        k = m.rvq.codebook_size;
      }
    }
    q = std::max<std::size_t>(q, 2);
    std::mt19937_64 rng(config.seed);
    CodeMatrix target(50, q);
    for (auto& c : target.codes) c = std::uniform_int_distribution<std::uint32_t>(0, k - 1)(rng);
    const auto oracle = make_oracle_predictor(target, k);
    const CodeMatrix out = refine(target.column(0), *oracle, RefineSchedule::cosine(config.refine_iterations), q);
    report["refiner"] = {{"layers", q}, {"frames", target.t}, {"exact", out == target}};
  }

  if (!config.paths.eval_report.empty()) write_text(config.paths.eval_report, report.dump(2) + "\n");
  return report;
}

}  // namespace mmseq::pipeline
