#include "mmseq/synth.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <future>
#include <regex>
#include <set>
#include <sstream>

#include "mmseq/error.hpp"

namespace mmseq::synth {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_lines(std::string_view s) {
  std::vector<std::string_view> lines;
  while (!s.empty()) {
    const auto nl = s.find('\n');
    auto line = s.substr(0, nl);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    if (nl == std::string_view::npos) break;
    s.remove_prefix(nl + 1);
  }
  return lines;
}

std::size_t word_count(std::string_view s) {
  std::size_t n = 0;
  bool in_word = false;
  for (char c : s) {
    const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::mt19937_64 seeded(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

// Runs fn(0..n-1) with at most `cap` calls in flight; results keep index order.
template <typename Fn>
auto parallel_map(std::size_t n, std::size_t cap, Fn fn) -> std::vector<decltype(fn(std::size_t{}))> {
  using R = decltype(fn(std::size_t{}));
  std::vector<R> out;
  out.reserve(n);
  cap = std::max<std::size_t>(1, cap);
  for (std::size_t start = 0; start < n; start += cap) {
    const std::size_t stop = std::min(n, start + cap);
    std::vector<std::future<R>> batch;
    for (std::size_t i = start; i < stop; ++i) batch.push_back(std::async(std::launch::async, fn, i));
    for (auto& f : batch) out.push_back(f.get());
  }
  return out;
}

template <typename T>
std::vector<std::size_t> sample_indices(std::span<const T> pool, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> all(pool.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::vector<std::size_t> picked;
  std::sample(all.begin(), all.end(), std::back_inserter(picked), std::min(k, pool.size()), rng);
  return picked;
}

std::string_view kind_name(Part::Kind k) {
  switch (k) {
    case Part::Kind::Text: return "text";
    case Part::Kind::Image: return "image";
    case Part::Kind::Music: return "music";
  }
  return "text";
}

}  // namespace

// ---------------------------------------------------------------------------
// Placeholders and dialogue records

std::vector<Part> parse_placeholders(std::string_view text) {
  std::vector<Part> parts;
  auto add_text = [&](std::string_view t) {
    if (t.empty()) return;
    if (!parts.empty() && parts.back().kind == Part::Kind::Text) {
      parts.back().text += t;
    } else {
      parts.push_back({Part::Kind::Text, std::string(t), {}, {}});
    }
  };
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto open = text.find('[', pos);
    if (open == std::string_view::npos) break;
    const auto rest = text.substr(open + 1);
    Part::Kind kind = Part::Kind::Text;
    std::size_t tag_len = 0;
    if (rest.starts_with("image:")) {
      kind = Part::Kind::Image;
      tag_len = 6;
    } else if (rest.starts_with("music:")) {
      kind = Part::Kind::Music;
      tag_len = 6;
    }
    const auto close = kind == Part::Kind::Text ? std::string_view::npos : text.find(']', open);
    if (close == std::string_view::npos) {
      add_text(text.substr(pos, open + 1 - pos));
      pos = open + 1;
      continue;
    }
    add_text(text.substr(pos, open - pos));
    const auto marker = text.substr(open, close + 1 - open);
    parts.push_back({kind, std::string(marker), std::string(trim(marker.substr(1 + tag_len, marker.size() - 2 - tag_len))), {}});
    pos = close + 1;
  }
  add_text(text.substr(pos));
  return parts;
}

std::string Turn::render() const {
  std::string out;
  for (const auto& p : parts) out += p.render();
  return out;
}

std::string Turn::spoken_text() const {
  std::string out;
  for (const auto& p : parts) {
    if (p.kind == Part::Kind::Text) out += p.text;
  }
  // Collapse the gaps left where placeholders were removed.
  std::string collapsed;
  bool space = false;
  for (char c : trim(out)) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      space = true;
      continue;
    }
    if (space && !collapsed.empty()) collapsed.push_back(' ');
    space = false;
    collapsed.push_back(c);
  }
  return collapsed;
}

std::size_t Dialogue::rounds() const {
  return static_cast<std::size_t>(std::count_if(turns.begin(), turns.end(), [](const Turn& t) { return t.speaker == Speaker::User; }));
}

std::size_t Dialogue::count(Part::Kind kind) const {
  std::size_t n = 0;
  for (const auto& t : turns) {
    for (const auto& p : t.parts) n += p.kind == kind ? 1 : 0;
  }
  return n;
}

nlohmann::json Dialogue::to_json() const {
  nlohmann::json j = {{"id", id}, {"topic", topic}, {"scenario", scenario}, {"provenance", provenance},
                      {"warnings", warnings}, {"turns", nlohmann::json::array()}};
  if (!failure.empty()) j["failure"] = failure;
  for (const auto& t : turns) {
    nlohmann::json jt = {{"speaker", t.speaker == Speaker::User ? "user" : "agent"}, {"text", t.render()},
                         {"parts", nlohmann::json::array()}};
    if (!t.speech_ref.empty()) jt["speech_ref"] = t.speech_ref;
    for (const auto& p : t.parts) {
      nlohmann::json jp = {{"type", kind_name(p.kind)}, {"text", p.text}};
      if (p.kind != Part::Kind::Text) jp["description"] = p.description;
      if (!p.media_ref.empty()) jp["media_ref"] = p.media_ref;
      jt["parts"].push_back(std::move(jp));
    }
    j["turns"].push_back(std::move(jt));
  }
  return j;
}

Dialogue Dialogue::from_json(const nlohmann::json& j) {
  Dialogue d;
  try {
    d.id = j.at("id").get<std::string>();
    d.topic = j.value("topic", std::string());
    d.scenario = j.value("scenario", std::string());
    d.provenance = j.value("provenance", nlohmann::json::object());
    d.warnings = j.value("warnings", std::vector<std::string>{});
    d.failure = j.value("failure", std::string());
    for (const auto& jt : j.at("turns")) {
      Turn t;
      const auto speaker = jt.at("speaker").get<std::string>();
      if (speaker != "user" && speaker != "agent") throw Error(Errc::BadFormat, "unknown speaker " + speaker);
      t.speaker = speaker == "user" ? Speaker::User : Speaker::Agent;
      t.speech_ref = jt.value("speech_ref", std::string());
      for (const auto& jp : jt.at("parts")) {
        Part p;
        const auto type = jp.at("type").get<std::string>();
        p.kind = type == "image" ? Part::Kind::Image : type == "music" ? Part::Kind::Music : Part::Kind::Text;
        p.text = jp.at("text").get<std::string>();
        p.description = jp.value("description", std::string());
        p.media_ref = jp.value("media_ref", std::string());
        t.parts.push_back(std::move(p));
      }
      d.turns.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::BadFormat, std::string("dialogue record: ") + e.what());
  }
  return d;
}

// ---------------------------------------------------------------------------
// Pools

const std::vector<ScenarioDemo>& default_scenario_demos() {
  static const std::vector<ScenarioDemo> pool = {
      {"Redecorating a small balcony",
       "The user shares a photo of a bare balcony and asks how to make it cosier. The chatbot suggests plants and "
       "lights, then draws a picture of the finished look."},
      {"Choosing music for a road trip",
       "The user plays a clip of a song they like and asks for similar tracks. The chatbot describes the style and "
       "composes a short upbeat piece for the drive."},
      {"Making a birthday card for grandma",
       "The user asks for a card design with flowers. The chatbot generates an image and the user asks for a softer "
       "colour palette."},
      {"Relaxing before sleep",
       "The user wants calming music for bedtime. The chatbot composes a slow piano piece and then suggests a short "
       "breathing routine."},
      {"Identifying a plant in the garden",
       "The user uploads a picture of a leafy plant and asks what it is. The chatbot names it and explains how much "
       "water it needs."},
      {"Turning a painting into music",
       "The user shares a picture of a stormy sea and asks for music that matches it. The chatbot describes the mood "
       "of the picture before composing a dramatic orchestral piece."},
      {"Planning a cosy reading corner",
       "The user asks for ideas to turn an empty corner into a reading nook. The chatbot sketches a layout with a "
       "chair, a lamp and shelves."},
  };
  return pool;
}

const std::vector<DialogDemo>& default_dialog_demos() {
  static const std::vector<DialogDemo> pool = {
      {"the user shares a picture of their messy desk and asks how to organise it.",
       "User: How can I tidy up this desk quickly? [image: a cluttered wooden desk with papers, mugs and cables]\n"
       "AnyGPT: Start by clearing the mugs, then bundle the cables together.\n"
       "User: Can you show me how it could look afterwards?\n"
       "AnyGPT: Here is a tidier version. [image: a neat wooden desk with a lamp, a plant and a closed laptop]\n"},
      {"the user wants music for a quiet Sunday morning.",
       "User: Please compose something gentle for a slow Sunday morning.\n"
       "AnyGPT: Here is a calm piece. [music: soft acoustic guitar with light piano, slow tempo, warm folk style]\n"
       "User: What makes this piece feel so relaxing?\n"
       "AnyGPT: The slow tempo and soft guitar plucking keep it light and peaceful.\n"},
      {"the user plays a track and asks for a matching picture.",
       "User: What picture would fit this song? [music: upbeat synthwave with bright synth leads and steady drums]\n"
       "AnyGPT: It sounds energetic and retro, like a neon city at night.\n"
       "User: Draw that neon city for me, please.\n"
       "AnyGPT: Here it is. [image: a glowing neon city street at night with rain reflections and purple sky]\n"
       "User: Could you make the sky a little brighter?\n"
       "AnyGPT: Sure, here is a brighter version. [image: a neon city street at dusk with a pink and orange sky]\n"},
      {"the user asks for help choosing a colour for a bedroom wall.",
       "User: Which wall colour suits this bedroom best? [image: a small bedroom with white walls and a wooden bed]\n"
       "AnyGPT: A soft sage green would make it feel calm and fresh.\n"
       "User: Can you play some music that matches that calm mood?\n"
       "AnyGPT: Of course. [music: ambient pads with gentle harp and soft flute, slow and airy]\n"},
  };
  return pool;
}

const std::vector<Requirement>& default_requirements() {
  static const std::vector<Requirement> pool = {
      {"the user provide images", 1.0},
      {"the user share music", 2.0},
      {"the user asks for music", 1.0},
      {"the user asks for images", 1.0},
  };
  return pool;
}

std::size_t sample_requirement(std::span<const Requirement> pool, std::mt19937_64& rng) {
  if (pool.empty()) throw Error(Errc::InvalidConfig, "requirement pool is empty");
  double total = 0.0;
  for (const auto& r : pool) {
    if (!(r.weight >= 0.0)) throw Error(Errc::InvalidConfig, "requirement weights must be non-negative");
    total += r.weight;
  }
  if (!(total > 0.0)) throw Error(Errc::AllZeroWeights, "requirement weights sum to zero");
  const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    acc += pool[i].weight;
    if (u < acc) return i;
  }
  return pool.size() - 1;
}

std::vector<std::string> parse_list(std::string_view response) {
  std::vector<std::string> items;
  static const std::regex marker(R"(^\s*(?:\d+\s*[.)]|[-*•])\s+(.*\S)\s*$)");
  for (auto line : split_lines(response)) {
    std::cmatch m;
    if (std::regex_match(line.data(), line.data() + line.size(), m, marker)) items.push_back(m[1].str());
  }
  return items;
}

// ---------------------------------------------------------------------------
// Prompts

namespace {

std::string topic_prompt(std::string_view metatopic, std::size_t n) {
  std::ostringstream o;
  o << "Give me " << n << " everyday, non-academic conversation topics about " << metatopic
    << " for a chat between an ordinary person and a helpful chatbot. Keep every topic to 1-10 words. "
    << "Each conversation should involve understanding or creating images or music. Answer as a numbered list.";
  return o.str();
}

std::string scenario_prompt(std::span<const ScenarioDemo> demos, std::span<const std::string> topics,
                            std::string_view requirement) {
  std::ostringstream o;
  o << "Help me brainstorm chat scenarios in which a user asks a chatbot for help.\n"
    << "Rules:\n"
    << "- The user is an ordinary person and the chatbot is helpful; nothing academic.\n"
    << "- Either side may use images or music to get ideas across, never video.\n"
    << "- When the user provides an image or some music, the user asks something about it.\n"
    << "- Images are never charts.\n"
    << "- Avoid well-known artworks or songs that raise copyright concerns.\n\n"
    << "Examples in the expected format:\n\n";
  for (const auto& d : demos) o << "Topic: " << d.topic << "\nScenario: " << d.description << "\n\n";
  o << "Write one block per topic below, using the same Topic:/Scenario: format.\n";
  for (std::size_t i = 0; i < topics.size(); ++i) o << i + 1 << ". " << topics[i] << "\n";
  o << "\nIn these scenarios, " << requirement << ".";
  return o.str();
}

std::string dialog_prompt(std::span<const DialogDemo> demos, std::string_view scenario) {
  std::ostringstream o;
  o << "Write a short conversation between a user and a chatbot called AnyGPT.\n"
    << "Both sides may include images or music, written as [image: description] or [music: description].\n"
    << "Use at most one piece of music per conversation; describe music by genre, style and instruments and never "
       "name a known song. Never name a famous person in an image description.\n"
    << "If the user asks to turn an image into music or the reverse, AnyGPT first says what it understood from the "
       "input.\n"
    << "Keep each utterance to roughly 5-15 words, and make every user utterance a question or an instruction.\n"
    << "Use 2 or 3 rounds, one piece of music and at most 2 images.\n"
    << "Reply only with lines starting with \"User:\" or \"AnyGPT:\".\n\n";
  for (const auto& d : demos) o << "---\nScenario: " << d.scenario << "\n" << d.transcript << "---\n";
  o << "\nScenario: " << scenario;
  return o.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage 1

TopicExpansion expand_topics(std::span<const std::string> metatopics, ChatClient& client, const TopicOptions& options,
                             const RetryPolicy& retry) {
  if (metatopics.empty()) throw Error(Errc::InvalidConfig, "no metatopics given");
  if (options.rounds == 0 || options.per_round == 0) throw Error(Errc::InvalidConfig, "topic rounds and per_round must be positive");
  TopicExpansion out;
  std::set<std::string> seen;
  for (const auto& meta : metatopics) {
    ChatRequest req;
    req.purpose = "topics";
    req.messages.push_back({"user", topic_prompt(meta, options.per_round)});
    for (std::size_t round = 0; round < options.rounds; ++round) {
      req.meta = {{"metatopic", meta}, {"round", round}, {"count", options.per_round}};
      const std::string reply = with_retry(retry, [&] { return client.complete(req); });
      const auto items = parse_list(reply);
      if (items.empty()) {
        throw Error(Errc::UnparseableResponse, "no topics in reply for '" + meta + "' round " + std::to_string(round));
      }
      out.raw_count += items.size();
      for (const auto& item : items) {
        if (seen.insert(lower(trim(item))).second) out.topics.push_back(item);
      }
      req.messages.push_back({"assistant", reply});
      req.messages.push_back({"user", "continue"});
    }
  }
  return out;
}

ScenarioBatch gen_scenarios(std::span<const std::string> topics, std::span<const ScenarioDemo> demos,
                            std::span<const Requirement> requirements, ChatClient& client,
                            const ScenarioOptions& options, const RetryPolicy& retry) {
  if (demos.empty() || requirements.empty()) throw Error(Errc::InvalidConfig, "demonstration and requirement pools must be non-empty");
  if (options.topics_per_call == 0) throw Error(Errc::InvalidConfig, "topics_per_call must be positive");
  ScenarioBatch out;
  for (std::size_t start = 0, call = 0; start < topics.size(); start += options.topics_per_call, ++call) {
    const auto chunk = topics.subspan(start, std::min(options.topics_per_call, topics.size() - start));
    auto rng = seeded(options.seed, call);
    const auto demo_ids = sample_indices(demos, options.demos_per_call, rng);
    std::vector<ScenarioDemo> picked;
    for (auto i : demo_ids) picked.push_back(demos[i]);
    const auto& requirement = requirements[sample_requirement(requirements, rng)].text;

    ChatRequest req;
    req.purpose = "scenarios";
    req.messages.push_back({"user", scenario_prompt(picked, chunk, requirement)});
    req.meta = {{"topics", std::vector<std::string>(chunk.begin(), chunk.end())}, {"requirement", requirement}};
    const std::string reply = with_retry(retry, [&] { return client.complete(req); });
    ++out.calls;
    if (trim(reply).empty()) throw Error(Errc::UnparseableResponse, "empty scenario reply");

    std::map<std::string, std::size_t> wanted;
    for (std::size_t i = 0; i < chunk.size(); ++i) wanted.emplace(lower(trim(chunk[i])), i);
    std::vector<std::optional<Scenario>> found(chunk.size());

    // Blocks are separated by blank lines.
    std::vector<std::vector<std::string_view>> blocks(1);
    for (auto line : split_lines(reply)) {
      if (trim(line).empty()) {
        if (!blocks.back().empty()) blocks.emplace_back();
      } else {
        blocks.back().push_back(line);
      }
    }
    for (const auto& block : blocks) {
      if (block.empty()) continue;
      std::string topic, description;
      for (auto line : block) {
        const auto t = trim(line);
        if (t.starts_with("Topic:")) {
          topic = std::string(trim(t.substr(6)));
        } else if (t.starts_with("Scenario:")) {
          description = std::string(trim(t.substr(9)));
        } else if (!description.empty()) {
          description += " " + std::string(t);
        }
      }
      auto it = wanted.find(lower(topic));
      if (topic.empty() || description.empty() || it == wanted.end() || found[it->second]) {
        ++out.malformed;
        spdlog::warn("skipping malformed scenario block (topic '{}')", topic);
        continue;
      }
      found[it->second] = Scenario{chunk[it->second], description, requirement};
    }
    for (auto& s : found) {
      if (s) out.scenarios.push_back(std::move(*s));
    }
  }
  return out;
}

std::vector<Turn> parse_transcript(std::string_view response) {
  struct Raw {
    Speaker speaker;
    std::string text;
  };
  std::vector<Raw> raw;
  for (auto line : split_lines(response)) {
    const auto t = trim(line);
    if (t.starts_with("User:")) {
      raw.push_back({Speaker::User, std::string(trim(t.substr(5)))});
    } else if (t.starts_with("AnyGPT:")) {
      raw.push_back({Speaker::Agent, std::string(trim(t.substr(7)))});
    } else if (!t.empty() && !raw.empty()) {
      raw.back().text += "\n" + std::string(t);
    }
  }
  if (raw.empty()) throw Error(Errc::UnparseableResponse, "transcript has no User:/AnyGPT: lines");
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const Speaker expected = i % 2 == 0 ? Speaker::User : Speaker::Agent;
    if (raw[i].speaker != expected) {
      throw Error(Errc::UnparseableResponse, "speakers do not alternate at turn " + std::to_string(i + 1));
    }
  }
  std::vector<Turn> turns;
  for (auto& r : raw) turns.push_back({r.speaker, parse_placeholders(r.text), {}});
  return turns;
}

Dialogue gen_dialog(const Scenario& scenario, std::span<const DialogDemo> demos, ChatClient& client,
                    const DialogOptions& options, const RetryPolicy& retry) {
  if (demos.empty()) throw Error(Errc::InvalidConfig, "dialog demonstration pool is empty");
  if (trim(scenario.description).empty()) throw Error(Errc::InvalidConfig, "scenario has no description");
  auto rng = seeded(options.seed, fnv1a(scenario.topic + "\n" + scenario.description));
  const auto demo_ids = sample_indices(demos, options.demos_per_call, rng);
  std::vector<DialogDemo> picked;
  for (auto i : demo_ids) picked.push_back(demos[i]);

  ChatRequest req;
  req.purpose = "dialog";
  req.messages.push_back({"user", dialog_prompt(picked, scenario.description)});
  req.meta = {{"topic", scenario.topic}, {"scenario", scenario.description}, {"requirement", scenario.requirement}};
  const std::string reply = with_retry(retry, [&] { return client.complete(req); });

  Dialogue d;
  d.topic = scenario.topic;
  d.scenario = scenario.description;
  d.turns = parse_transcript(reply);
  d.provenance = {{"prompt", "dialog"}, {"demos", demo_ids}, {"seed", options.seed}, {"requirement", scenario.requirement}};
  return d;
}

void annotate_style(Dialogue& dialog, std::size_t min_words, std::size_t max_words) {
  static const std::set<std::string> kOpeners = {
      "please", "can",     "could", "would", "will",     "show",    "tell",    "make",   "create", "draw",
      "paint",  "generate", "compose", "play", "describe", "help",    "give",    "write",  "turn",   "convert",
      "suggest", "recommend", "explain", "what", "how",   "why",     "which",   "who",    "where",  "when",
      "is",     "are",     "do",    "does",  "design",   "imagine", "let's",   "find",   "add",    "change"};
  for (std::size_t i = 0; i < dialog.turns.size(); ++i) {
    const auto& t = dialog.turns[i];
    const std::string spoken = t.spoken_text();
    const std::size_t words = word_count(spoken);
    if (words < min_words || words > max_words) {
      dialog.warnings.push_back("turn " + std::to_string(i + 1) + ": " + std::to_string(words) + " words");
    }
    if (t.speaker != Speaker::User) continue;
    const bool question = !spoken.empty() && spoken.back() == '?';
    std::string first = lower(spoken.substr(0, spoken.find(' ')));
    while (!first.empty() && std::ispunct(static_cast<unsigned char>(first.back()))) first.pop_back();
    if (!question && !kOpeners.contains(first)) {
      dialog.warnings.push_back("turn " + std::to_string(i + 1) + ": user turn is not a question or instruction");
    }
  }
}

// ---------------------------------------------------------------------------
// Stage 2

Dialogue convert_to_multimodal(const Dialogue& dialog, const MediaClients& clients, MediaStore& store) {
  Dialogue out = dialog;
  if (!out.failure.empty()) return out;
  auto fetch = [&](MediaClient* client, std::string_view what, std::string_view request) {
    if (!client) throw Error(Errc::InvalidConfig, std::string("no ") + std::string(what) + " client configured");
    const MediaPayload payload = with_retry(RetryPolicy::for_client(client->live()), [&] {
      MediaPayload p = client->generate(request);
      if (p.bytes.empty()) throw std::runtime_error(std::string(what) + " client returned an empty payload");
      return p;
    });
    return store.put(payload);
  };
  try {
    for (auto& turn : out.turns) {
      for (auto& part : turn.parts) {
        if (part.kind == Part::Kind::Image) part.media_ref = fetch(clients.image, "image", part.description);
        if (part.kind == Part::Kind::Music) part.media_ref = fetch(clients.music, "music", part.description);
      }
      const std::string spoken = turn.spoken_text();
      if (!spoken.empty()) turn.speech_ref = fetch(clients.speech, "speech", spoken);
    }
  } catch (const Error& e) {
    if (e.code() != Errc::ClientFailure) throw;
    out.failure = "media_failure";
    out.provenance["failure_detail"] = e.what();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Filtering

void FilterRules::validate() const {
  if (max_music == 0 || max_images == 0 || max_rounds == 0 || min_rounds == 0 || min_words == 0 || max_words == 0) {
    throw Error(Errc::InvalidConfig, "filter bounds must be positive");
  }
  if (min_rounds > max_rounds || min_words > max_words) throw Error(Errc::InvalidConfig, "filter minimum exceeds maximum");
  for (const auto& p : banned_patterns) {
    try {
      std::regex re(p, std::regex::icase);
    } catch (const std::regex_error&) {
      throw Error(Errc::InvalidConfig, "invalid banned pattern '" + p + "'");
    }
  }
}

nlohmann::json FilterRules::to_json() const {
  return {{"max_music", max_music}, {"max_images", max_images}, {"max_rounds", max_rounds}, {"min_rounds", min_rounds},
          {"min_words", min_words}, {"max_words", max_words},   {"banned_patterns", banned_patterns}};
}

FilterRules FilterRules::from_json(const nlohmann::json& j) {
  FilterRules r;
  r.max_music = j.value("max_music", r.max_music);
  r.max_images = j.value("max_images", r.max_images);
  r.max_rounds = j.value("max_rounds", r.max_rounds);
  r.min_rounds = j.value("min_rounds", r.min_rounds);
  r.min_words = j.value("min_words", r.min_words);
  r.max_words = j.value("max_words", r.max_words);
  r.banned_patterns = j.value("banned_patterns", r.banned_patterns);
  r.validate();
  return r;
}

std::vector<std::string> check_rules(const Dialogue& dialog, const FilterRules& rules) {
  std::vector<std::string> reasons;
  if (!dialog.failure.empty()) reasons.push_back(dialog.failure);
  if (dialog.count(Part::Kind::Music) > rules.max_music) reasons.push_back("music_count>" + std::to_string(rules.max_music));
  if (dialog.count(Part::Kind::Image) > rules.max_images) reasons.push_back("image_count>" + std::to_string(rules.max_images));
  if (dialog.rounds() > rules.max_rounds) reasons.push_back("rounds>" + std::to_string(rules.max_rounds));
  if (dialog.rounds() < rules.min_rounds) reasons.push_back("rounds<" + std::to_string(rules.min_rounds));
  for (const auto& p : rules.banned_patterns) {
    const std::regex re(p, std::regex::icase);
    const bool hit = std::any_of(dialog.turns.begin(), dialog.turns.end(),
                                 [&](const Turn& t) { return std::regex_search(t.render(), re); });
    if (hit) {
      reasons.push_back("banned_content");
      break;
    }
  }
  return reasons;
}

FilterResult filter_dialogs(std::span<const Dialogue> dialogs, const FilterRules& rules) {
  rules.validate();
  FilterResult out;
  for (const auto& d : dialogs) {
    auto reasons = check_rules(d, rules);
    if (reasons.empty()) {
      out.accepted.push_back(d);
    } else {
      out.rejected.push_back({d, std::move(reasons)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(Errc::InvalidConfig, "synth config must be an object");
  SynthConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.metatopics = j.value("metatopics", c.metatopics);
    if (j.contains("topics")) {
      c.topics.per_round = j["topics"].value("per_round", c.topics.per_round);
      c.topics.rounds = j["topics"].value("rounds", c.topics.rounds);
    }
    c.max_scenario_topics = j.value("max_scenario_topics", c.max_scenario_topics);
    c.scenario_demos_per_call = j.value("scenario_demos_per_call", c.scenario_demos_per_call);
    c.topics_per_call = j.value("topics_per_call", c.topics_per_call);
    c.dialog_demos_per_call = j.value("dialog_demos_per_call", c.dialog_demos_per_call);
    c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
    if (j.contains("rules")) c.rules = FilterRules::from_json(j["rules"]);
    if (j.contains("clients")) {
      const auto& cl = j["clients"];
      if (cl.contains("chat")) c.chat = EndpointConfig::from_json(cl["chat"]);
      if (cl.contains("image")) c.image = EndpointConfig::from_json(cl["image"]);
      if (cl.contains("music")) c.music = EndpointConfig::from_json(cl["music"]);
      if (cl.contains("speech")) c.speech = EndpointConfig::from_json(cl["speech"]);
    }
    for (const auto& d : j.value("scenario_demos", nlohmann::json::array())) {
      c.scenario_demos.push_back({d.at("topic").get<std::string>(), d.at("description").get<std::string>()});
    }
    for (const auto& d : j.value("dialog_demos", nlohmann::json::array())) {
      c.dialog_demos.push_back({d.at("scenario").get<std::string>(), d.at("transcript").get<std::string>()});
    }
    c.output_dir = j.value("output_dir", c.output_dir.string());
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidConfig, std::string("synth config: ") + e.what());
  }
  if (c.metatopics.empty()) throw Error(Errc::InvalidConfig, "synth config needs at least one metatopic");
  if (c.max_in_flight == 0) throw Error(Errc::InvalidConfig, "max_in_flight must be positive");
  return c;
}

nlohmann::json SynthReport::to_json() const {
  return {{"metatopics", metatopics},
          {"topics_raw", topics_raw},
          {"topics", topics},
          {"scenarios", scenarios},
          {"malformed_scenarios", malformed_scenarios},
          {"dialogs", dialogs},
          {"unparseable_dialogs", unparseable_dialogs},
          {"accepted", accepted},
          {"rejected", rejected},
          {"rejection_reasons", rejection_reasons},
          {"images", images},
          {"music", music},
          {"speech", speech},
          {"style_warnings", style_warnings}};
}

SynthReport run_synthesis(const SynthConfig& config, const SynthClients& clients) {
  config.rules.validate();
  if (!clients.chat) throw Error(Errc::InvalidConfig, "no chat client");
  const auto& scenario_demos = config.scenario_demos.empty() ? default_scenario_demos() : config.scenario_demos;
  const auto& dialog_demos = config.dialog_demos.empty() ? default_dialog_demos() : config.dialog_demos;
  const RetryPolicy chat_retry = RetryPolicy::for_client(clients.chat->live());
  SynthReport report;
  report.metatopics = config.metatopics.size();

  // Stage 1a: topics, one metatopic conversation per task.
  const auto per_meta = parallel_map(config.metatopics.size(), config.max_in_flight, [&](std::size_t i) {
    return expand_topics(std::span<const std::string>(&config.metatopics[i], 1), *clients.chat, config.topics, chat_retry);
  });
  std::vector<std::string> topics;
  std::set<std::string> seen;
  for (const auto& e : per_meta) {
    report.topics_raw += e.raw_count;
    for (const auto& t : e.topics) {
      if (seen.insert(lower(trim(t))).second) topics.push_back(t);
    }
  }
  report.topics = topics.size();
  spdlog::info("topics: {} raw, {} unique", report.topics_raw, report.topics);

  // Stage 1b: scenarios for a seeded subset of topics, in calls of topics_per_call.
  std::vector<std::string> chosen;
  {
    auto rng = seeded(config.seed, 0x7e5c);
    std::sample(topics.begin(), topics.end(), std::back_inserter(chosen), std::min(config.max_scenario_topics, topics.size()), rng);
  }
  const std::size_t per_call = std::max<std::size_t>(1, config.topics_per_call);
  const std::size_t ncalls = (chosen.size() + per_call - 1) / per_call;
  const auto batches = parallel_map(ncalls, config.max_in_flight, [&](std::size_t c) {
    const auto chunk = std::span<const std::string>(chosen).subspan(c * per_call, std::min(per_call, chosen.size() - c * per_call));
    ScenarioOptions opts{config.scenario_demos_per_call, per_call, config.seed ^ (0x9e3779b97f4a7c15ull * (c + 1))};
    return gen_scenarios(chunk, scenario_demos, default_requirements(), *clients.chat, opts, chat_retry);
  });
  std::vector<Scenario> scenarios;
  for (const auto& b : batches) {
    report.malformed_scenarios += b.malformed;
    scenarios.insert(scenarios.end(), b.scenarios.begin(), b.scenarios.end());
  }
  report.scenarios = scenarios.size();

  // Stage 1c: dialogs.
  const auto drafts = parallel_map(scenarios.size(), config.max_in_flight, [&](std::size_t i) -> std::optional<Dialogue> {
    try {
      return gen_dialog(scenarios[i], dialog_demos, *clients.chat, {config.dialog_demos_per_call, config.seed}, chat_retry);
    } catch (const Error& e) {
      if (e.code() != Errc::UnparseableResponse) throw;
      spdlog::warn("dialog for '{}' unparseable: {}", scenarios[i].topic, e.what());
      return std::nullopt;
    }
  });
  std::vector<Dialogue> dialogs;
  for (const auto& d : drafts) {
    if (!d) {
      ++report.unparseable_dialogs;
      continue;
    }
    Dialogue dialog = *d;
    char id[32];
    std::snprintf(id, sizeof id, "dialog-%05zu", dialogs.size());
    dialog.id = id;
    annotate_style(dialog, config.rules.min_words, config.rules.max_words);
    report.style_warnings += dialog.warnings.size();
    dialogs.push_back(std::move(dialog));
  }
  report.dialogs = dialogs.size();

  // Text-level filtering first so no media is generated for doomed dialogs.
  FilterResult first = filter_dialogs(dialogs, config.rules);

  // Stage 2.
  MediaStore store(config.output_dir / "media");
  const auto converted = parallel_map(first.accepted.size(), config.max_in_flight, [&](std::size_t i) {
    return convert_to_multimodal(first.accepted[i], clients.media, store);
  });
  FilterResult final_pass = filter_dialogs(converted, config.rules);
  std::vector<Rejection> rejected = std::move(first.rejected);
  rejected.insert(rejected.end(), final_pass.rejected.begin(), final_pass.rejected.end());
  std::sort(rejected.begin(), rejected.end(), [](const Rejection& a, const Rejection& b) { return a.dialog.id < b.dialog.id; });

  // Post-pass: every accepted dialog must still satisfy every rule.
  for (const auto& d : final_pass.accepted) {
    if (!check_rules(d, config.rules).empty()) throw Error(Errc::InvalidConfig, "accepted dialog " + d.id + " violates the rules");
  }

  report.accepted = final_pass.accepted.size();
  report.rejected = rejected.size();
  for (const auto& r : rejected) ++report.rejection_reasons[r.reasons.front()];
  for (const auto& d : final_pass.accepted) {
    report.images += d.count(Part::Kind::Image);
    report.music += d.count(Part::Kind::Music);
    for (const auto& t : d.turns) report.speech += t.speech_ref.empty() ? 0 : 1;
  }

  std::filesystem::create_directories(config.output_dir);
  auto write = [&](const std::string& name, const std::string& body) {
    std::ofstream f(config.output_dir / name, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(Errc::Io, "cannot write " + (config.output_dir / name).string());
    f << body;
  };
  std::string dataset, rejects;
  for (const auto& d : final_pass.accepted) dataset += d.to_json().dump() + "\n";
  for (const auto& r : rejected) {
    auto j = r.dialog.to_json();
    j["reasons"] = r.reasons;
    rejects += j.dump() + "\n";
  }
  write("dataset.jsonl", dataset);
  write("rejected.jsonl", rejects);
  write("stats.json", report.to_json().dump(2) + "\n");
  spdlog::info("synthesis: {} accepted, {} rejected", report.accepted, report.rejected);
  return report;
}

}  // namespace mmseq::synth
