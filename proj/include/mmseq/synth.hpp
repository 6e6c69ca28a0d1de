#pragma once

// Instruction-dialog synthesis: topics -> scenarios -> text dialogs with
// [image: ...] / [music: ...] placeholders, then media generation through
// pluggable clients, filtering and JSONL output.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "json.hpp"

namespace mmseq::synth {

// ---------------------------------------------------------------------------
// Clients

struct ChatMessage {
  std::string role;  // "user" or "assistant"
  std::string content;
};

struct ChatRequest {
  std::string purpose;  // "topics", "scenarios" or "dialog"
  std::vector<ChatMessage> messages;
  // Structured copy of what the prompt was built from. Live clients ignore
  // it; mocks use it instead of re-parsing prose.
  nlohmann::json meta = nlohmann::json::object();
};

class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual std::string complete(const ChatRequest& request) = 0;
  virtual bool live() const { return false; }
};

enum class MediaKind { Image, Music, Speech };

std::string_view media_kind_name(MediaKind kind);

struct MediaPayload {
  std::vector<std::uint8_t> bytes;
  std::string extension;  // without the dot
};

class MediaClient {
 public:
  virtual ~MediaClient() = default;
  virtual MediaPayload generate(std::string_view description) = 0;
  virtual bool live() const { return false; }
};

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds initial_backoff{1000};
  double multiplier = 2.0;

  // Backoff only applies to live clients; mocks retry immediately.
  static RetryPolicy for_client(bool live);
};

[[noreturn]] void throw_client_failure(int attempts, const std::string& what);

// Calls `fn` up to policy.attempts times. The last failure is rethrown as
// ClientFailure. `sleep` is injectable for tests.
template <typename Fn>
auto with_retry(const RetryPolicy& policy, Fn&& fn,
                const std::function<void(std::chrono::milliseconds)>& sleep = {}) -> decltype(fn());

// Deterministic chat stand-in: the reply is a function of (seed, request).
class MockChatClient final : public ChatClient {
 public:
  explicit MockChatClient(std::uint64_t seed) : seed_(seed) {}
  std::string complete(const ChatRequest& request) override;
  std::size_t calls() const { return calls_; }

 private:
  std::uint64_t seed_;
  std::atomic<std::size_t> calls_{0};
};

// Deterministic media stand-in. Images are small PGM files; music and speech
// are JSON frame sequences (not audio). The first `fail_first` calls throw.
class MockMediaClient final : public MediaClient {
 public:
  MockMediaClient(MediaKind kind, std::uint64_t seed, std::size_t fail_first = 0)
      : kind_(kind), seed_(seed), fail_first_(fail_first) {}
  MediaPayload generate(std::string_view description) override;

  std::size_t calls() const;
  std::vector<std::string> requests() const;

 private:
  MediaKind kind_;
  std::uint64_t seed_;
  std::size_t fail_first_;
  mutable std::mutex mu_;
  std::vector<std::string> requests_;
};

struct EndpointConfig {
  std::string type = "mock";  // "mock" or "http"
  std::string base_url;       // e.g. https://api.openai.com
  std::string path;           // e.g. /v1/chat/completions
  std::string model;
  std::string api_key_env;    // name of the environment variable holding the key
  std::string extension;      // file extension for media payloads
  int timeout_seconds = 60;
  std::size_t fail_first = 0;  // mock only

  static EndpointConfig from_json(const nlohmann::json& j);
};

// OpenAI-compatible chat completions endpoint.
class HttpChatClient final : public ChatClient {
 public:
  explicit HttpChatClient(EndpointConfig config) : config_(std::move(config)) {}
  std::string complete(const ChatRequest& request) override;
  bool live() const override { return true; }

 private:
  EndpointConfig config_;
};

// POSTs {"model", "prompt"} and stores the body. A JSON reply carrying
// data[0].b64_json (image APIs) is base64-decoded first.
class HttpMediaClient final : public MediaClient {
 public:
  explicit HttpMediaClient(EndpointConfig config) : config_(std::move(config)) {}
  MediaPayload generate(std::string_view description) override;
  bool live() const override { return true; }

 private:
  EndpointConfig config_;
};

std::unique_ptr<ChatClient> make_chat_client(const EndpointConfig& config, std::uint64_t seed);
std::unique_ptr<MediaClient> make_media_client(MediaKind kind, const EndpointConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Dialogue model

struct Part {
  enum class Kind { Text, Image, Music };
  Kind kind = Kind::Text;
  std::string text;         // raw text; for placeholders the full "[kind: ...]" marker
  std::string description;  // placeholders only
  std::string media_ref;    // set by convert_to_multimodal

  std::string render() const { return text; }
  bool operator==(const Part&) const = default;
};

// Splits on "[image: ...]" and "[music: ...]". Rendering the parts in order
// reproduces the input exactly; unclosed or unknown markers stay text.
std::vector<Part> parse_placeholders(std::string_view text);

enum class Speaker { User, Agent };

struct Turn {
  Speaker speaker = Speaker::User;
  std::vector<Part> parts;
  std::string speech_ref;  // synthesized voice for the turn's text

  std::string render() const;
  // Text with placeholders removed, as sent to speech synthesis.
  std::string spoken_text() const;
  bool operator==(const Turn&) const = default;
};

struct Dialogue {
  std::string id;
  std::string topic;
  std::string scenario;
  std::vector<Turn> turns;
  nlohmann::json provenance = nlohmann::json::object();
  std::vector<std::string> warnings;
  std::string failure;  // set when stage 2 could not complete

  std::size_t rounds() const;
  std::size_t count(Part::Kind kind) const;
  nlohmann::json to_json() const;
  static Dialogue from_json(const nlohmann::json& j);
  bool operator==(const Dialogue&) const = default;
};

// ---------------------------------------------------------------------------
// Stage 1

struct Scenario {
  std::string topic;
  std::string description;
  std::string requirement;
};

struct ScenarioDemo {
  std::string topic;
  std::string description;
};

struct DialogDemo {
  std::string scenario;
  std::string transcript;
};

const std::vector<ScenarioDemo>& default_scenario_demos();
const std::vector<DialogDemo>& default_dialog_demos();

struct Requirement {
  std::string text;
  double weight = 1.0;
};

// "the user share music" carries twice the weight of the other three.
const std::vector<Requirement>& default_requirements();
std::size_t sample_requirement(std::span<const Requirement> pool, std::mt19937_64& rng);

// Numbered or bulleted list -> items, markers stripped.
std::vector<std::string> parse_list(std::string_view response);

struct TopicExpansion {
  std::vector<std::string> topics;  // deduplicated, first occurrence kept
  std::size_t raw_count = 0;        // before deduplication
};

struct TopicOptions {
  std::size_t per_round = 50;
  std::size_t rounds = 4;
};

TopicExpansion expand_topics(std::span<const std::string> metatopics, ChatClient& client,
                             const TopicOptions& options = {}, const RetryPolicy& retry = RetryPolicy::for_client(false));

struct ScenarioOptions {
  std::size_t demos_per_call = 5;
  std::size_t topics_per_call = 10;
  std::uint64_t seed = 0;
};

struct ScenarioBatch {
  std::vector<Scenario> scenarios;
  std::size_t malformed = 0;  // blocks skipped
  std::size_t calls = 0;
};

ScenarioBatch gen_scenarios(std::span<const std::string> topics, std::span<const ScenarioDemo> demos,
                            std::span<const Requirement> requirements, ChatClient& client,
                            const ScenarioOptions& options = {},
                            const RetryPolicy& retry = RetryPolicy::for_client(false));

// "User: ..." / "AnyGPT: ..." lines -> turns. Lines without a speaker tag
// continue the previous turn. Throws UnparseableResponse when empty, when it
// does not start with the user, or when speakers do not alternate.
std::vector<Turn> parse_transcript(std::string_view response);

struct DialogOptions {
  std::size_t demos_per_call = 3;
  std::uint64_t seed = 0;
};

Dialogue gen_dialog(const Scenario& scenario, std::span<const DialogDemo> demos, ChatClient& client,
                    const DialogOptions& options = {}, const RetryPolicy& retry = RetryPolicy::for_client(false));

// Soft checks: user turns should read as a question or instruction; turns
// should be 5-15 words. Findings go to dialog.warnings.
void annotate_style(Dialogue& dialog, std::size_t min_words = 5, std::size_t max_words = 15);

// ---------------------------------------------------------------------------
// Stage 2

// Content-addressed payload directory. References are "<sha256>.<ext>".
class MediaStore {
 public:
  explicit MediaStore(std::filesystem::path dir);
  std::string put(const MediaPayload& payload);
  std::filesystem::path path_of(std::string_view ref) const { return dir_ / std::string(ref); }
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

std::string sha256_hex(std::span<const std::uint8_t> bytes);

struct MediaClients {
  MediaClient* image = nullptr;
  MediaClient* music = nullptr;
  MediaClient* speech = nullptr;
};

// Resolves every placeholder and voices every turn. A client that keeps
// failing marks the dialog with failure "media_failure".
Dialogue convert_to_multimodal(const Dialogue& dialog, const MediaClients& clients, MediaStore& store);

// ---------------------------------------------------------------------------
// Filtering

struct FilterRules {
  std::size_t max_music = 1;
  std::size_t max_images = 2;
  std::size_t max_rounds = 3;
  std::size_t min_rounds = 2;
  std::size_t min_words = 5;   // soft
  std::size_t max_words = 15;  // soft
  std::vector<std::string> banned_patterns;  // case-insensitive regexes

  void validate() const;
  nlohmann::json to_json() const;
  static FilterRules from_json(const nlohmann::json& j);
};

struct Rejection {
  Dialogue dialog;
  std::vector<std::string> reasons;  // e.g. "music_count>1", "rounds>3", "media_failure"
};

struct FilterResult {
  std::vector<Dialogue> accepted;
  std::vector<Rejection> rejected;
};

// Reasons a dialog breaks `rules`; empty when it conforms.
std::vector<std::string> check_rules(const Dialogue& dialog, const FilterRules& rules);
FilterResult filter_dialogs(std::span<const Dialogue> dialogs, const FilterRules& rules);

// ---------------------------------------------------------------------------
// Whole pipeline

struct SynthConfig {
  std::uint64_t seed = 0;
  std::vector<std::string> metatopics;
  TopicOptions topics;
  std::size_t max_scenario_topics = 40;  // desk-scale cap on topics sent on to stage 1b
  std::size_t scenario_demos_per_call = 5;
  std::size_t topics_per_call = 10;
  std::size_t dialog_demos_per_call = 3;
  std::size_t max_in_flight = 4;
  FilterRules rules;
  EndpointConfig chat, image, music, speech;
  std::vector<ScenarioDemo> scenario_demos;  // empty -> built-in pool
  std::vector<DialogDemo> dialog_demos;      // empty -> built-in pool
  std::filesystem::path output_dir = "synth_out";

  static SynthConfig from_json(const nlohmann::json& j);
};

struct SynthClients {
  ChatClient* chat = nullptr;
  MediaClients media;
};

struct SynthReport {
  std::size_t metatopics = 0;
  std::size_t topics_raw = 0;
  std::size_t topics = 0;
  std::size_t scenarios = 0;
  std::size_t malformed_scenarios = 0;
  std::size_t dialogs = 0;
  std::size_t unparseable_dialogs = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::map<std::string, std::size_t> rejection_reasons;
  std::size_t images = 0;
  std::size_t music = 0;
  std::size_t speech = 0;
  std::size_t style_warnings = 0;

  nlohmann::json to_json() const;
};

// Runs both stages and writes dataset.jsonl, rejected.jsonl, stats.json and
// media/ under config.output_dir.
SynthReport run_synthesis(const SynthConfig& config, const SynthClients& clients);

// ---------------------------------------------------------------------------

template <typename Fn>
auto with_retry(const RetryPolicy& policy, Fn&& fn, const std::function<void(std::chrono::milliseconds)>& sleep)
    -> decltype(fn()) {
  auto delay = policy.initial_backoff;
  for (int attempt = 1;; ++attempt) {
    try {
      return fn();
    } catch (const std::exception& e) {
      if (attempt >= policy.attempts) throw_client_failure(attempt, e.what());
    }
    if (delay.count() > 0) {
      if (sleep) {
        sleep(delay);
      } else {
        std::this_thread::sleep_for(delay);
      }
    }
    delay = std::chrono::milliseconds(static_cast<long long>(static_cast<double>(delay.count()) * policy.multiplier));
  }
}

}  // namespace mmseq::synth
