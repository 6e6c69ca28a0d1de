#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include <openssl/evp.h>

#include <array>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mmseq/error.hpp"
#include "mmseq/rvq.hpp"
#include "mmseq/synth.hpp"

namespace mmseq::synth {

std::string_view media_kind_name(MediaKind kind) {
  switch (kind) {
    case MediaKind::Image: return "image";
    case MediaKind::Music: return "music";
    case MediaKind::Speech: return "speech";
  }
  return "unknown";
}

RetryPolicy RetryPolicy::for_client(bool live) {
  RetryPolicy p;
  if (!live) p.initial_backoff = std::chrono::milliseconds(0);
  return p;
}

void throw_client_failure(int attempts, const std::string& what) {
  throw Error(Errc::ClientFailure, "gave up after " + std::to_string(attempts) + " attempt(s): " + what);
}

namespace {

// FNV-1a, used to derive mock seeds from request content.
std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::mt19937_64 rng_for(std::uint64_t seed, std::string_view content) {
  const std::uint64_t h = fnv1a(content, fnv1a(std::to_string(seed)));
  std::seed_seq seq{static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return std::mt19937_64(seq);
}

template <std::size_t N>
const char* pick(std::mt19937_64& rng, const std::array<const char*, N>& words) {
  return words[std::uniform_int_distribution<std::size_t>(0, N - 1)(rng)];
}

constexpr std::array<const char*, 12> kVerbs = {"planning",   "sketching", "decorating", "celebrating",
                                                "learning",   "choosing",  "designing",  "remembering",
                                                "organizing", "exploring", "capturing",  "relaxing with"};
constexpr std::array<const char*, 16> kAdjectives = {"a cozy",   "a rainy",    "a colorful", "a quiet",
                                                     "a retro",  "a seaside",  "a festive",  "a minimalist",
                                                     "a spooky", "a sunny",    "a snowy",    "a vintage",
                                                     "a lively", "a handmade", "a family",   "a midnight"};
constexpr std::array<const char*, 16> kNouns = {"kitchen",   "garden",  "road trip", "birthday party",
                                                "bedroom",   "picnic",  "bookshop",  "wedding",
                                                "cafe",      "concert", "campsite",  "morning routine",
                                                "pet photo", "poster",  "workout",   "holiday card"};
constexpr std::array<const char*, 10> kGenres = {"lo-fi hip hop", "acoustic folk", "smooth jazz", "ambient",
                                                 "upbeat pop",   "classical",     "synthwave",   "bossa nova",
                                                 "blues",        "orchestral"};
constexpr std::array<const char*, 10> kInstruments = {"piano",  "acoustic guitar", "violin",  "soft drums",
                                                      "flute",  "cello",           "synth pads", "saxophone",
                                                      "ukulele", "harp"};
constexpr std::array<const char*, 8> kStyles = {"a watercolor painting", "a photo",        "a pencil sketch",
                                                "a digital illustration", "an oil painting", "a cartoon",
                                                "a pastel drawing",       "a night photo"};

std::string image_description(std::mt19937_64& rng, std::string_view subject) {
  std::ostringstream o;
  o << pick(rng, kStyles) << " of " << pick(rng, kAdjectives) << " " << subject << " with soft light";
  return o.str();
}

std::string music_description(std::mt19937_64& rng) {
  std::ostringstream o;
  o << pick(rng, kGenres) << " with " << pick(rng, kInstruments) << " and " << pick(rng, kInstruments)
    << ", gentle tempo";
  return o.str();
}

std::string mock_topics(std::mt19937_64& rng, const nlohmann::json& meta) {
  const auto metatopic = meta.value("metatopic", std::string("daily life"));
  const auto count = meta.value("count", std::size_t{50});
  std::ostringstream o;
  for (std::size_t i = 1; i <= count; ++i) {
    o << i << ". " << pick(rng, kVerbs) << " " << pick(rng, kAdjectives) << " " << pick(rng, kNouns) << " ("
      << metatopic << ")\n";
  }
  return o.str();
}

std::string mock_scenarios(std::mt19937_64& rng, const nlohmann::json& meta) {
  const auto requirement = meta.value("requirement", std::string("the user provide images"));
  std::ostringstream o;
  for (const auto& t : meta.value("topics", std::vector<std::string>{})) {
    o << "Topic: " << t << "\n";
    o << "Scenario: The user is " << t << " and wants help from the chatbot with " << pick(rng, kAdjectives) << " "
      << pick(rng, kNouns) << " idea. In this scenario, " << requirement << ".\n\n";
  }
  return o.str();
}

std::string mock_dialog(std::mt19937_64& rng, const nlohmann::json& meta) {
  const auto requirement = meta.value("requirement", std::string());
  const auto topic = meta.value("topic", std::string("a hobby"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::size_t rounds = unit(rng) < 0.5 ? 2 : 3;
  // Mock quirks, so the filter has something to reject.
  if (unit(rng) < 0.08) rounds = 4;
  const bool extra_music = unit(rng) < 0.08;
  const bool user_images = requirement.find("provide images") != std::string::npos;
  const bool user_music = requirement.find("share music") != std::string::npos;
  const bool agent_music = requirement.find("asks for music") != std::string::npos;

  std::size_t music_left = 1, images_left = 2;
  std::vector<std::pair<std::string, std::string>> turns;
  for (std::size_t r = 0; r < rounds; ++r) {
    std::string user, agent;
    if (music_left > 0 && user_music && r == 0) {
      user = "What mood does this tune create for me? [music: " + music_description(rng) + "]";
      agent = "It feels warm and calm, great for unwinding after a long day.";
      --music_left;
    } else if (music_left > 0 && agent_music && r == 0) {
      user = "Please compose a short piece that fits " + topic + ".";
      agent = "Here is a gentle piece for you. [music: " + music_description(rng) + "]";
      --music_left;
    } else if (images_left > 0 && user_images && unit(rng) < 0.8) {
      user = "Can you tell me what stands out in this picture? [image: " + image_description(rng, pick(rng, kNouns)) + "]";
      agent = "The soft colors and the small details make it feel inviting.";
      --images_left;
    } else if (images_left > 0 && unit(rng) < 0.6) {
      user = "Could you draw something that captures " + topic + " for me?";
      agent = "Sure, here is my take on it. [image: " + image_description(rng, pick(rng, kNouns)) + "]";
      --images_left;
    } else {
      user = "Any quick tips to make my " + std::string(pick(rng, kNouns)) + " more fun?";
      agent = "Add a personal touch and invite a friend to join you.";
    }
    turns.emplace_back(std::move(user), std::move(agent));
  }
  if (music_left > 0) {
    turns.back().second += " Here is some music to match. [music: " + music_description(rng) + "]";
  }
  if (extra_music) turns.back().second += " Or try this one. [music: " + music_description(rng) + "]";

  std::ostringstream o;
  for (const auto& [user, agent] : turns) o << "User: " << user << "\nAnyGPT: " << agent << "\n";
  return o.str();
}

}  // namespace

std::string MockChatClient::complete(const ChatRequest& request) {
  ++calls_;
  std::string key = request.purpose;
  for (const auto& m : request.messages) key += "\x1f" + m.role + "\x1e" + m.content;
  key += "\x1d" + request.meta.dump();
  auto rng = rng_for(seed_, key);
  if (request.purpose == "topics") return mock_topics(rng, request.meta);
  if (request.purpose == "scenarios") return mock_scenarios(rng, request.meta);
  if (request.purpose == "dialog") return mock_dialog(rng, request.meta);
  return "";
}

MediaPayload MockMediaClient::generate(std::string_view description) {
  std::size_t call = 0;
  {
    std::lock_guard lock(mu_);
    requests_.emplace_back(description);
    call = requests_.size();
  }
  if (call <= fail_first_) {
    throw std::runtime_error("mock " + std::string(media_kind_name(kind_)) + " client failure #" + std::to_string(call));
  }
  auto rng = rng_for(seed_, std::string(media_kind_name(kind_)) + ":" + std::string(description));
  MediaPayload p;
  if (kind_ == MediaKind::Image) {
    const std::string header = "P5\n16 16\n255\n";
    p.bytes.assign(header.begin(), header.end());
    std::uniform_int_distribution<int> byte(0, 255);
    for (int i = 0; i < 256; ++i) p.bytes.push_back(static_cast<std::uint8_t>(byte(rng)));
    p.extension = "pgm";
    return p;
  }
  std::size_t t = 250;  // five seconds at 50 Hz
  if (kind_ == MediaKind::Speech) {
    std::istringstream words{std::string(description)};
    std::size_t n = 0;
    for (std::string w; words >> w;) ++n;
    t = std::max<std::size_t>(10, 10 * n);
  }
  Frames f;
  f.dim = 8;
  std::normal_distribution<float> normal(0.0f, 1.0f);
  f.data.resize(t * f.dim);
  for (float& v : f.data) v = normal(rng);
  const std::string body = frames_to_json(f).dump();
  p.bytes.assign(body.begin(), body.end());
  p.extension = "frames.json";
  return p;
}

std::size_t MockMediaClient::calls() const {
  std::lock_guard lock(mu_);
  return requests_.size();
}

std::vector<std::string> MockMediaClient::requests() const {
  std::lock_guard lock(mu_);
  return requests_;
}

EndpointConfig EndpointConfig::from_json(const nlohmann::json& j) {
  EndpointConfig c;
  if (!j.is_object()) throw Error(Errc::InvalidConfig, "client config must be an object");
  c.type = j.value("type", c.type);
  if (c.type != "mock" && c.type != "http") throw Error(Errc::InvalidConfig, "client type must be 'mock' or 'http'");
  c.base_url = j.value("base_url", c.base_url);
  c.path = j.value("path", c.path);
  c.model = j.value("model", c.model);
  c.api_key_env = j.value("api_key_env", c.api_key_env);
  c.extension = j.value("extension", c.extension);
  c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
  c.fail_first = j.value("fail_first", c.fail_first);
  if (c.type == "http" && c.base_url.empty()) throw Error(Errc::InvalidConfig, "http client needs base_url");
  return c;
}

namespace {

httplib::Headers auth_headers(const EndpointConfig& c) {
  httplib::Headers h;
  if (!c.api_key_env.empty()) {
    const char* key = std::getenv(c.api_key_env.c_str());
    if (!key || !*key) throw Error(Errc::InvalidConfig, "environment variable " + c.api_key_env + " is not set");
    h.emplace("Authorization", std::string("Bearer ") + key);
  }
  return h;
}

std::string post_json(const EndpointConfig& c, const std::string& default_path, const nlohmann::json& body,
                      std::string* content_type) {
  httplib::Client cli(c.base_url);
  cli.set_connection_timeout(c.timeout_seconds);
  cli.set_read_timeout(c.timeout_seconds);
  cli.set_write_timeout(c.timeout_seconds);
  const auto path = c.path.empty() ? default_path : c.path;
  auto res = cli.Post(path, auth_headers(c), body.dump(), "application/json");
  if (!res) throw std::runtime_error("request to " + c.base_url + path + " failed: " + httplib::to_string(res.error()));
  if (res->status < 200 || res->status >= 300) {
    throw std::runtime_error("HTTP " + std::to_string(res->status) + " from " + c.base_url + path);
  }
  if (content_type) *content_type = res->get_header_value("Content-Type");
  return res->body;
}

std::vector<std::uint8_t> base64_decode(std::string_view in) {
  std::vector<std::uint8_t> out(3 * ((in.size() + 3) / 4));
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(in.data()), static_cast<int>(in.size()));
  if (n < 0) throw std::runtime_error("invalid base64 payload");
  std::size_t len = static_cast<std::size_t>(n);
  for (auto it = in.rbegin(); it != in.rend() && *it == '=' && len > 0; ++it) --len;
  out.resize(len);
  return out;
}

}  // namespace

std::string HttpChatClient::complete(const ChatRequest& request) {
  nlohmann::json body = {{"model", config_.model}, {"messages", nlohmann::json::array()}};
  for (const auto& m : request.messages) body["messages"].push_back({{"role", m.role}, {"content", m.content}});
  const auto reply = nlohmann::json::parse(post_json(config_, "/v1/chat/completions", body, nullptr), nullptr, false);
  if (reply.is_discarded() || !reply.contains("choices") || reply["choices"].empty()) {
    throw std::runtime_error("chat reply without choices");
  }
  return reply["choices"][0]["message"].value("content", std::string());
}

MediaPayload HttpMediaClient::generate(std::string_view description) {
  nlohmann::json body = {{"model", config_.model}, {"prompt", description}, {"input", description}};
  std::string content_type;
  const std::string raw = post_json(config_, "/", body, &content_type);
  MediaPayload p;
  p.extension = config_.extension.empty() ? "bin" : config_.extension;
  if (content_type.find("json") != std::string::npos) {
    const auto j = nlohmann::json::parse(raw, nullptr, false);
    if (!j.is_discarded() && j.contains("data") && !j["data"].empty() && j["data"][0].contains("b64_json")) {
      p.bytes = base64_decode(j["data"][0]["b64_json"].get<std::string>());
      return p;
    }
  }
  if (raw.empty()) throw std::runtime_error("empty media response");
  p.bytes.assign(raw.begin(), raw.end());
  return p;
}

std::unique_ptr<ChatClient> make_chat_client(const EndpointConfig& config, std::uint64_t seed) {
  if (config.type == "http") return std::make_unique<HttpChatClient>(config);
  return std::make_unique<MockChatClient>(seed);
}

std::unique_ptr<MediaClient> make_media_client(MediaKind kind, const EndpointConfig& config, std::uint64_t seed) {
  if (config.type == "http") return std::make_unique<HttpMediaClient>(config);
  return std::make_unique<MockMediaClient>(kind, seed, config.fail_first);
}

// ---------------------------------------------------------------------------

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error(Errc::Io, "SHA-256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 15]);
  }
  return out;
}

MediaStore::MediaStore(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw Error(Errc::Io, "cannot create media directory " + dir_.string() + ": " + ec.message());
}

std::string MediaStore::put(const MediaPayload& payload) {
  static std::atomic<std::uint64_t> counter{0};
  const std::string ref = sha256_hex(payload.bytes) + "." + (payload.extension.empty() ? "bin" : payload.extension);
  const auto final_path = dir_ / ref;
  if (std::filesystem::exists(final_path)) return ref;
  const auto tmp = dir_ / (ref + ".tmp" + std::to_string(counter.fetch_add(1)));
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(Errc::Io, "cannot write " + tmp.string());
    f.write(reinterpret_cast<const char*>(payload.bytes.data()), static_cast<std::streamsize>(payload.bytes.size()));
    if (!f) throw Error(Errc::Io, "write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, final_path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(Errc::Io, "cannot publish " + final_path.string());
  }
  return ref;
}

}  // namespace mmseq::synth
