#include "mmseq/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "mmseq/error.hpp"

namespace mmseq {

void DecodeStrategy::validate() const {
  if (beam_size < 1) throw Error(Errc::InvalidConfig, "beam_size must be at least 1");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw Error(Errc::InvalidConfig, "top_p must lie in (0, 1]");
  if (!(repetition_penalty >= 1.0)) throw Error(Errc::InvalidConfig, "repetition_penalty must be >= 1");
  if (!(temperature > 0.0)) throw Error(Errc::InvalidConfig, "temperature must be positive");
}

DecodeStrategy DecodeStrategy::text() {
  DecodeStrategy s;
  s.mode = DecodeMode::Beam;
  s.beam_size = 5;
  return s;
}

DecodeStrategy DecodeStrategy::image() {
  DecodeStrategy s;
  s.top_p = 0.7;
  return s;
}

DecodeStrategy DecodeStrategy::speech() { return image(); }

DecodeStrategy DecodeStrategy::music() {
  DecodeStrategy s;
  s.top_p = 1.0;
  s.repetition_penalty = 1.15;
  return s;
}

DecodeStrategy DecodeStrategy::for_target(std::string_view target) {
  if (target == "text") return text();
  if (target == "image") return image();
  if (target == "speech") return speech();
  if (target == "music") return music();
  throw Error(Errc::UnknownModality, "no decoding defaults for '" + std::string(target) + "'");
}

nlohmann::json DecodeStrategy::to_json() const {
  return {{"mode", mode == DecodeMode::Beam ? "beam" : "sample"},
          {"beam_size", beam_size},
          {"top_p", top_p},
          {"repetition_penalty", repetition_penalty},
          {"temperature", temperature},
          {"max_new_tokens", max_new_tokens},
          {"seed", seed}};
}

DecodeStrategy DecodeStrategy::from_json(const nlohmann::json& j, DecodeStrategy s) {
  if (!j.is_object()) throw Error(Errc::InvalidConfig, "decode strategy must be an object");
  if (j.contains("mode")) {
    const auto m = j.at("mode").get<std::string>();
    if (m == "beam") {
      s.mode = DecodeMode::Beam;
    } else if (m == "sample") {
      s.mode = DecodeMode::Sample;
    } else {
      throw Error(Errc::InvalidConfig, "unknown decode mode '" + m + "'");
    }
  }
  s.beam_size = j.value("beam_size", s.beam_size);
  s.top_p = j.value("top_p", s.top_p);
  s.repetition_penalty = j.value("repetition_penalty", s.repetition_penalty);
  s.temperature = j.value("temperature", s.temperature);
  s.max_new_tokens = j.value("max_new_tokens", s.max_new_tokens);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

std::size_t apply_repetition_penalty(std::span<double> logits, std::span<const TokenId> history, double penalty) {
  if (penalty == 1.0) return 0;
  std::set<TokenId> seen(history.begin(), history.end());
  std::size_t changed = 0;
  for (TokenId t : seen) {
    if (t >= logits.size()) continue;
    double& l = logits[t];
    l = l > 0.0 ? l / penalty : l * penalty;
    ++changed;
  }
  return changed;
}

std::vector<double> softmax(std::span<const double> logits, double temperature) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  double mx = -std::numeric_limits<double>::infinity();
  for (double l : logits) mx = std::max(mx, l / temperature);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += p[i] = std::exp(logits[i] / temperature - mx);
  for (double& v : p) v /= sum;
  return p;
}

std::vector<TokenId> nucleus_support(std::span<const double> probs, double top_p) {
  std::vector<TokenId> order(probs.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) { return probs[a] > probs[b]; });
  if (top_p >= 1.0) return order;
  double mass = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    mass += probs[order[keep++]];
    // A hair of slack so that e.g. 0.5 + 0.2 counts as reaching 0.7.
    if (mass >= top_p - 1e-12) break;
  }
  order.resize(keep);
  return order;
}

std::vector<double> nucleus_filter(std::span<const double> probs, double top_p) {
  std::vector<double> out(probs.size(), 0.0);
  double mass = 0.0;
  for (TokenId t : nucleus_support(probs, top_p)) mass += out[t] = probs[t];
  for (double& v : out) v /= mass;
  return out;
}

TokenId sample_index(std::span<const double> probs, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  TokenId last = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last = static_cast<TokenId>(i);
    if (u < acc) return last;
  }
  return last;  // rounding left u above the final cumulative sum
}

nlohmann::json DecodeTraceStep::to_json() const {
  return {{"step", step},
          {"mode", mode == DecodeMode::Beam ? "beam" : "sample"},
          {"top_p", top_p},
          {"repetition_penalty", repetition_penalty},
          {"temperature", temperature},
          {"penalized", penalized},
          {"support_size", support_size},
          {"token", token}};
}

namespace {

struct Beam {
  std::vector<TokenId> context;  // prompt + generated
  std::size_t generated = 0;
  double logprob = 0.0;
  DecoderState state;
  std::vector<double> next_logits;

  double score() const { return generated == 0 ? 0.0 : logprob / static_cast<double>(generated); }
};

std::vector<TokenId> sample_decode(const IncrementalDecoder& dec, std::span<const TokenId> prompt,
                                   const DecodeStrategy& s, std::optional<TokenId> eos, const DecodeTrace& trace) {
  const std::size_t limit = dec.params().config.max_seq_len;
  std::mt19937_64 rng(s.seed);
  DecoderState state = dec.start();
  std::vector<double> logits;
  for (TokenId t : prompt) logits = dec.append(state, t);
  std::vector<TokenId> context(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  for (std::size_t step = 0; step < s.max_new_tokens; ++step) {
    DecodeTraceStep ts{step, DecodeMode::Sample, s.top_p, s.repetition_penalty, s.temperature, 0, 0, 0};
    ts.penalized = apply_repetition_penalty(logits, context, s.repetition_penalty);
    const auto probs = nucleus_filter(softmax(logits, s.temperature), s.top_p);
    ts.support_size = static_cast<std::size_t>(std::count_if(probs.begin(), probs.end(), [](double p) { return p > 0.0; }));
    const TokenId next = sample_index(probs, rng);
    ts.token = next;
    if (trace) trace(ts);
    out.push_back(next);
    context.push_back(next);
    if (eos && next == *eos) break;
    if (state.length >= limit) break;
    logits = dec.append(state, next);
  }
  return out;
}

std::vector<TokenId> beam_decode(const IncrementalDecoder& dec, std::span<const TokenId> prompt,
                                 const DecodeStrategy& s, std::optional<TokenId> eos, const DecodeTrace& trace) {
  const std::size_t limit = dec.params().config.max_seq_len;
  Beam root;
  root.state = dec.start();
  for (TokenId t : prompt) root.next_logits = dec.append(root.state, t);
  root.context.assign(prompt.begin(), prompt.end());

  std::vector<Beam> live;
  live.push_back(std::move(root));
  std::vector<Beam> finished;

  struct Candidate {
    double score;
    double logprob;
    std::size_t beam;
    TokenId token;
  };

  for (std::size_t step = 0; step < s.max_new_tokens && !live.empty(); ++step) {
    std::vector<Candidate> cands;
    std::size_t penalized_first = 0;
    for (std::size_t b = 0; b < live.size(); ++b) {
      std::vector<double> logits = live[b].next_logits;
      const std::size_t pen = apply_repetition_penalty(logits, live[b].context, s.repetition_penalty);
      if (b == 0) penalized_first = pen;
      const auto probs = softmax(logits, s.temperature);
      const double len = static_cast<double>(live[b].generated + 1);
      for (std::size_t t = 0; t < probs.size(); ++t) {
        if (probs[t] <= 0.0) continue;
        const double lp = live[b].logprob + std::log(probs[t]);
        cands.push_back({lp / len, lp, b, static_cast<TokenId>(t)});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });

    std::vector<Beam> next;
    for (const auto& c : cands) {
      if (next.size() >= s.beam_size) break;
      Beam nb;
      nb.context = live[c.beam].context;
      nb.context.push_back(c.token);
      nb.generated = live[c.beam].generated + 1;
      nb.logprob = c.logprob;
      const bool done = (eos && c.token == *eos) || step + 1 == s.max_new_tokens || live[c.beam].state.length >= limit;
      if (done) {
        finished.push_back(std::move(nb));
        continue;
      }
      nb.state = live[c.beam].state;
      nb.next_logits = dec.append(nb.state, c.token);
      next.push_back(std::move(nb));
    }
    if (trace) {
      DecodeTraceStep ts{step, DecodeMode::Beam, s.top_p, s.repetition_penalty, s.temperature, penalized_first,
                         next.size(), cands.empty() ? 0u : cands.front().token};
      trace(ts);
    }
    live = std::move(next);
    if (finished.size() >= s.beam_size) break;
  }

  const Beam* best = nullptr;
  for (const auto* pool : {&finished, &live}) {
    for (const auto& b : *pool) {
      if (b.generated == 0) continue;
      if (!best || b.score() > best->score()) best = &b;
    }
  }
  if (!best) return {};
  return {best->context.begin() + static_cast<std::ptrdiff_t>(prompt.size()), best->context.end()};
}

}  // namespace

std::vector<TokenId> generate(const ModelParams& params, std::span<const TokenId> prompt,
                              const DecodeStrategy& strategy, std::optional<TokenId> eos, const DecodeTrace& trace) {
  strategy.validate();
  if (prompt.empty()) throw Error(Errc::InvalidConfig, "prompt must not be empty");
  if (prompt.size() > params.config.max_seq_len) {
    throw Error(Errc::PromptTooLong, "prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_seq_len " +
                                         std::to_string(params.config.max_seq_len));
  }
  const IncrementalDecoder dec(params);
  if (strategy.mode == DecodeMode::Beam) return beam_decode(dec, prompt, strategy, eos, trace);
  return sample_decode(dec, prompt, strategy, eos, trace);
}

std::vector<TokenId> generate(const ModelParams& params, const UnifiedVocab& vocab, std::span<const TokenId> prompt,
                              const DecodeStrategy& strategy, const DecodeTrace& trace) {
  return generate(params, prompt, strategy, vocab.special_id(special::kEos), trace);
}

}  // namespace mmseq
