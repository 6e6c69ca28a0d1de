// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
// fails. Usage: acceptance [work_dir]

#include <omp.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fuzz.hpp"
#include "mmseq/decoding.hpp"
#include "mmseq/error.hpp"
#include "mmseq/model.hpp"
#include "mmseq/pipeline.hpp"
#include "mmseq/refiner.hpp"
#include "mmseq/rvq.hpp"
#include "mmseq/sequence.hpp"
#include "mmseq/stream_parser.hpp"
#include "mmseq/synth.hpp"
#include "mmseq/vocab.hpp"
#include "oracles.hpp"

using namespace mmseq;
namespace fs = std::filesystem;

namespace {

fs::path g_work = "acceptance_work";

// Collects the first failed check of a criterion.
struct Check {
  std::vector<std::string> failures;
  std::ostringstream notes;

  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  bool ok() const { return failures.empty(); }
};

fs::path fresh(const std::string& name) {
  const auto dir = g_work / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

CodebookSet random_books(const RVQConfig& c, std::uint64_t seed) {
  CodebookSet b;
  b.config = c;
  b.data.resize(std::size_t{c.num_layers} * c.codebook_size * c.frame_dim);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (auto& v : b.data) v = n(rng);
  return b;
}

// ---------------------------------------------------------------------------

void token_geometry(Check& c) {
  const std::uint32_t d = 4;
  {
    const auto cfg = RVQConfig::speech_preset(d, 1);
    const auto books = random_books(cfg, 1);
    const auto frames = static_cast<std::size_t>(10 * cfg.frame_rate.value());
    const auto codes = encode(oracle::gaussian_frames(frames, d, 2), books);
    const auto ids = MediaLayout::speech(cfg.codebook_size, cfg.num_layers).to_local_ids(codes);
    c.expect(frames == 500, "speech: 10 s is not 500 frames");
    c.expect(codes.t == 500 && codes.q == 8, "speech: code matrix is not 500x8");
    c.expect(cfg.codebook_size == 1024, "speech: K != 1024");
    c.expect(ids.size() == 500, "speech: LM tokens != 500");
    bool semantic = true;
    for (std::size_t t = 0; t < codes.t; ++t) semantic = semantic && ids[t] == codes.at(t, 0);
    c.expect(semantic, "speech: LM tokens are not the layer-1 codes");
  }
  {
    const auto cfg = RVQConfig::music_preset(d, 1024, 1);
    const auto books = random_books(cfg, 3);
    const auto frames = static_cast<std::size_t>(kMusicUnitSeconds * cfg.frame_rate.value());
    const auto codes = encode(oracle::gaussian_frames(frames, d, 4), books);
    const auto layout = MediaLayout::music(cfg.codebook_size, cfg.num_layers);
    const auto ids = layout.to_local_ids(codes);
    c.expect(codes.t == 250 && codes.q == 4, "music: code matrix is not 250x4");
    c.expect(ids.size() == 1000, "music: flattened length != 1000");
    c.expect(layout.from_local_ids(ids) == codes, "music: unflatten does not invert flatten");
    c.expect(layout.vocab_size() == 4096, "music: vocabulary != 4096");
    c.expect(MediaLayout::music(2048).vocab_size() == 8192, "music: 2048-entry vocabulary != 8192");
  }
  {
    const auto cfg = RVQConfig::image_preset(d, 1);
    const auto books = random_books(cfg, 5);
    const auto codes = encode(oracle::gaussian_frames(kImageFramesPerImage, d, 6), books);
    const auto ids = MediaLayout::image(cfg.codebook_size).to_local_ids(codes);
    c.expect(cfg.num_layers == 1 && cfg.codebook_size == 8192, "image: preset is not 1x8192");
    c.expect(ids.size() == 32, "image: tokens per image != 32");
  }
}

void rvq_properties(Check& c) {
  std::size_t monotone = 0, code_mismatch = 0;
  double worst_gap = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    RVQConfig cfg;
    cfg.frame_dim = 4;
    cfg.num_layers = 4;
    cfg.codebook_size = 8;
    cfg.seed = s;
    const auto x = oracle::gaussian_frames(256, 4, 1000 + s);
    const auto books = train_codebooks(x, cfg);
    const auto curve = layer_error_curve(x, books);
    std::vector<std::uint32_t> ref_codes;
    const auto ref = oracle::greedy_error_curve(x, books, &ref_codes);
    code_mismatch += encode(x, books).codes != ref_codes;
    bool ok = true;
    for (std::size_t i = 1; i < curve.size(); ++i) ok = ok && curve[i] <= curve[i - 1];
    // Frames and codebooks are f32, the reference runs in double.
    for (std::size_t i = 0; i < curve.size(); ++i) worst_gap = std::max(worst_gap, std::abs(curve[i] - ref[i]) / ref[i]);
    monotone += ok;
  }
  c.expect(monotone == 100, std::to_string(100 - monotone) + " datasets with an increasing error curve");
  c.expect(code_mismatch == 0, std::to_string(code_mismatch) + " datasets encode differently from the brute-force reference");
  c.expect(worst_gap < 1e-6, "error curve disagrees with the brute-force reference");

  // Lattice fixtures: layer scales 10, 1, 0.1 keep greedy choices unique.
  CodebookSet books;
  books.config.frame_dim = 2;
  books.config.num_layers = 3;
  books.config.codebook_size = 4;
  const float corners[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  for (float scale : {10.0f, 1.0f, 0.1f}) {
    for (const auto& p : corners) {
      books.data.push_back(p[0] * scale);
      books.data.push_back(p[1] * scale);
    }
  }
  std::size_t exact = 0;
  for (std::uint32_t n = 0; n < 64; ++n) {
    CodeMatrix m(1, 3);
    m.at(0, 0) = n % 4;
    m.at(0, 1) = (n / 4) % 4;
    m.at(0, 2) = n / 16;
    exact += encode(decode(m, books), books) == m;
  }
  c.expect(exact == 64, "lattice roundtrip failed on " + std::to_string(64 - exact) + " of 64 fixtures");

  RVQConfig cfg;
  cfg.frame_dim = 6;
  cfg.num_layers = 3;
  cfg.codebook_size = 16;
  cfg.seed = 42;
  const auto x = oracle::gaussian_frames(512, 6, 9);
  const auto a = train_codebooks(x, cfg), b = train_codebooks(x, cfg);
  c.expect(serialize_codebooks(a) == serialize_codebooks(b), "codebooks differ for equal seeds");
}

void vocabulary(Check& c) {
  std::mt19937_64 rng(99);
  const char* names[] = {"image", "speech", "music", "video", "depth", "touch", "smell", "heat"};
  std::size_t law_failures = 0;
  std::vector<UnifiedVocab> frozen;
  for (int trial = 0; trial < 1000; ++trial) {
    UnifiedVocab v(1 + static_cast<std::uint32_t>(rng() % 512));
    auto law = [&] {
      std::uint64_t sum = v.text_base_size();
      for (const auto& e : v.entries()) sum += e.local_size + 2;
      if (v.frozen()) sum += 5;
      return sum == v.total_size();
    };
    law_failures += !law();
    const std::size_t n = 1 + rng() % 8;
    for (std::size_t i = 0; i < n; ++i) {
      v.register_modality(names[i], 1 + static_cast<std::uint32_t>(rng() % 2000));
      law_failures += !law();
    }
    v.freeze();
    law_failures += !law();
    if (trial < 100) frozen.push_back(std::move(v));
  }
  c.expect(law_failures == 0, std::to_string(law_failures) + " sigma-law violations");

  std::size_t bijection_failures = 0;
  for (int i = 0; i < 100000; ++i) {
    const auto& v = frozen[rng() % frozen.size()];
    const TokenId id = static_cast<TokenId>(rng() % v.total_size());
    const auto info = v.to_local(id);
    TokenId back = 0;
    switch (info.kind) {
      case TokenKind::Text: back = info.local; break;
      case TokenKind::Modality: back = v.to_global(v.entries()[static_cast<std::size_t>(info.modality)].name, info.local); break;
      case TokenKind::Special: back = v.special_id(info.special); break;
    }
    bijection_failures += back != id;
  }
  c.expect(bijection_failures == 0, std::to_string(bijection_failures) + " global/local roundtrip failures");
}

void template_fidelity(Check& c) {
  UnifiedVocab v(256);
  v.register_modality("image", 8192).register_modality("speech", 1024).register_modality("music", 4096).freeze();
  const std::vector<std::uint32_t> speech = {5, 6}, image = {3};
  const auto a = build_pair_sample(v, "Convert the speech to text", "speech", speech, "hi", Direction::XToText);
  const auto b = build_pair_sample(v, "Draw this", "image", image, "a cat", Direction::TextToX);
  const std::string ga = "[Human]: Convert the speech to text.<sosp><sp_5><sp_6><eosp><eoh>[AnyGPT]: hi<eos>";
  const std::string gb = "[Human]: Draw this. This is input:a cat<eoh>[AnyGPT]: <soim><im_3><eoim><eos>";
  c.expect(v.render(a.tokens) == ga, "x-to-text rendering: " + v.render(a.tokens));
  c.expect(v.render(b.tokens) == gb, "text-to-x rendering: " + v.render(b.tokens));
}

void builder_parser_roundtrip(Check& c) {
  const auto v = fuzz::three_modalities();
  std::mt19937_64 rng(5);
  std::size_t invalid = 0, mismatched = 0, undetected = 0, corruptions = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto s = fuzz::random_sample(v, rng);
    invalid += !validate(v, s.tokens).empty();
    mismatched += parse_segments(v, s.tokens) != s.segments;
    std::vector<std::size_t> brackets;
    for (std::size_t p = 0; p < s.size(); ++p) {
      if (fuzz::is_bracket(v, s.tokens[p])) brackets.push_back(p);
    }
    // Every bracket, deleted or swapped for a text byte.
    for (std::size_t p : brackets) {
      auto dropped = s.tokens;
      dropped.erase(dropped.begin() + static_cast<std::ptrdiff_t>(p));
      auto swapped = s.tokens;
      swapped[p] = 'x';
      undetected += validate(v, dropped).empty();
      undetected += validate(v, swapped).empty();
      corruptions += 2;
    }
  }
  c.expect(invalid == 0, std::to_string(invalid) + " built sequences fail validation");
  c.expect(mismatched == 0, std::to_string(mismatched) + " sequences re-parse into different segments");
  c.expect(corruptions > 0, "fuzzer produced no brackets");
  c.expect(undetected == 0, std::to_string(undetected) + " of " + std::to_string(corruptions) + " corruptions undetected");
  c.notes << corruptions << " corruptions";
}

// Shared toy pipeline: corpus, tokenizers and packed dataset.
pipeline::PipelineConfig toy_pipeline(const std::string& name) {
  const auto dir = fresh(name);
  const auto config = pipeline::PipelineConfig::load(pipeline::write_toy_corpus(dir, 0));
  for (const auto& m : config.modalities) pipeline::cmd_train_tokenizer(config, m.name);
  pipeline::cmd_build_dataset(config);
  return config;
}

void lm_correctness(Check& c) {
  {
    ModelConfig mc;
    mc.vocab_size = 16;
    mc.dim = 8;
    mc.num_layers = 2;
    mc.num_heads = 2;
    mc.max_seq_len = 16;
    mc.seed = 3;
    mc.init_std = 0.5;
    const auto params = init_model(mc);
    std::mt19937_64 rng(4);
    std::vector<TokenSequence> batch(3);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const std::size_t n = 6 + 3 * b;
      for (std::size_t i = 0; i < n; ++i) batch[b].tokens.push_back(static_cast<TokenId>(rng() % 16));
      batch[b].loss_mask.assign(n, 1);
      batch[b].loss_mask[1] = 0;
    }
    ModelParams grad;
    loss_and_grad(params, batch, &grad);
    const double h = 1e-5;
    double diff2 = 0.0, ref2 = 0.0, ana2 = 0.0;
    ModelParams p = params;
    for (std::size_t t = 0; t < p.tensors.size(); ++t) {
      for (std::size_t i = 0; i < p.tensors[t].data.size(); ++i) {
        const double orig = p.tensors[t].data[i];
        p.tensors[t].data[i] = orig + h;
        const double up = loss_and_grad(p, batch, nullptr);
        p.tensors[t].data[i] = orig - h;
        const double down = loss_and_grad(p, batch, nullptr);
        p.tensors[t].data[i] = orig;
        const double fd = (up - down) / (2 * h), an = grad.tensors[t].data[i];
        diff2 += (fd - an) * (fd - an);
        ref2 += fd * fd;
        ana2 += an * an;
      }
    }
    const double rel = std::sqrt(diff2) / std::max(std::sqrt(ref2), std::sqrt(ana2));
    c.expect(rel < 1e-4, "gradient relative error " + std::to_string(rel));
    c.notes << "grad rel " << rel;

    const auto grown = expand_vocab(params, 24, 8);
    const std::vector<TokenId> prompt = {1, 5, 9, 15, 0};
    const auto l0 = forward(params, prompt), l1 = forward(grown, prompt);
    double worst = 0.0;
    for (std::size_t r = 0; r < prompt.size(); ++r) {
      for (std::size_t k = 0; k < 16; ++k) worst = std::max(worst, std::abs(l1[r * 24 + k] - l0[r * 16 + k]));
    }
    c.expect(worst <= 1e-12, "vocab expansion moved an old logit by " + std::to_string(worst));
  }

  // Overfit the 32-record toy corpus on one core.
  const int threads = omp_get_max_threads();
  omp_set_num_threads(1);
  auto config = toy_pipeline("overfit");
  c.expect(config.train.steps <= 2000, "toy config trains for more than 2000 steps");
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = pipeline::cmd_train(config);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  omp_set_num_threads(threads);
  c.expect(r.heldin_loss < 0.1, "held-in loss " + std::to_string(r.heldin_loss));
  c.expect(secs < 300.0, "overfit took " + std::to_string(secs) + " s");
  c.notes << ", held-in loss " << r.heldin_loss << " after " << r.steps << " steps in " << secs << " s on 1 thread";
}

void decoding(Check& c) {
  std::size_t beam_mismatch = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ModelConfig mc;
    mc.vocab_size = 3;
    mc.dim = 8;
    mc.num_layers = 1;
    mc.num_heads = 2;
    mc.max_seq_len = 16;
    mc.seed = seed;
    mc.init_std = 1.0;
    const auto p = init_model(mc);
    const std::vector<TokenId> prompt = {0};
    std::vector<TokenId> best;
    double best_lp = -1e300;
    for (TokenId n = 0; n < 27; ++n) {
      const std::vector<TokenId> seq = {n / 9, (n / 3) % 3, n % 3};
      std::vector<TokenId> ctx = prompt;
      double lp = 0.0;
      for (TokenId t : seq) {
        const auto probs = softmax_rows(forward(p, ctx), 3);
        lp += std::log(probs[(ctx.size() - 1) * 3 + t]);
        ctx.push_back(t);
      }
      if (lp > best_lp) {
        best_lp = lp;
        best = seq;
      }
    }
    DecodeStrategy s = DecodeStrategy::text();
    s.beam_size = 5;
    s.max_new_tokens = 3;
    beam_mismatch += generate(p, prompt, s, std::nullopt) != best;
  }
  c.expect(beam_mismatch == 0, "beam(5) missed the exhaustive argmax on " + std::to_string(beam_mismatch) + " models");

  const std::vector<double> probs = {0.5, 0.3, 0.2};
  c.expect(nucleus_support(probs, 0.7) == std::vector<TokenId>{0, 1}, "top-p 0.7 support is not {0,1}");

  std::vector<double> logits = {2.0, -1.0, 0.5, 3.0};
  const std::vector<TokenId> history = {0, 1, 0};
  apply_repetition_penalty(logits, history, 1.15);
  const double err = std::max({std::abs(logits[0] - 2.0 / 1.15), std::abs(logits[1] + 1.15), std::abs(logits[2] - 0.5),
                               std::abs(logits[3] - 3.0)});
  c.expect(err <= 1e-12, "repetition penalty arithmetic off by " + std::to_string(err));

  const std::vector<double> raw = {1.0, 0.2, -0.5, 2.0, 0.0};
  const auto target = softmax(raw);
  const auto filtered = nucleus_filter(target, 1.0);
  std::mt19937_64 rng(11);
  std::vector<double> freq(raw.size(), 0.0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) freq[sample_index(filtered, rng)] += 1.0 / n;
  double worst = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) worst = std::max(worst, std::abs(freq[i] - target[i]));
  c.expect(worst <= 0.01, "sampling frequency off by " + std::to_string(worst));
  c.notes << "max frequency error " << worst;
}

void two_stage(Check& c) {
  std::mt19937_64 rng(21);
  std::size_t inexact = 0;
  for (int trial = 0; trial < 20; ++trial) {
    CodeMatrix target(20 + rng() % 80, 8);
    for (auto& x : target.codes) x = static_cast<std::uint32_t>(rng() % 1024);
    const auto oracle = make_oracle_predictor(target, 1024);
    const auto semantic = target.column(0);
    const auto out = refine(semantic, *oracle, RefineSchedule::cosine(1 + trial % 8), 8);
    inexact += !(out == target && out.column(0) == semantic);
  }
  c.expect(inexact == 0, std::to_string(inexact) + " oracle refinements were not exact");

  const std::uint32_t k = 16;
  const auto utts = fuzz::speech_utterances(5, 64, 50, 8, k);
  const std::span<const CodeMatrix> train(utts.data(), 48), held(utts.data() + 48, 16);
  ConditionalCodePredictor pred(k, 8);
  pred.fit(train);
  std::size_t hits = 0, total = 0;
  for (const auto& u : held) {
    const auto out = refine(u.column(0), pred, RefineSchedule::cosine(4), 8);
    for (std::size_t t = 0; t < u.t; ++t) hits += out.at(t, 1) == u.at(t, 1);
    total += u.t;
  }
  const double acc = static_cast<double>(hits) / static_cast<double>(total);
  const double chance = 1.0 / k;
  const double bar = chance + 3 * std::sqrt(chance * (1 - chance) / static_cast<double>(total));
  c.expect(acc > bar, "layer-2 accuracy " + std::to_string(acc) + " <= " + std::to_string(bar));
  c.notes << "layer-2 accuracy " << acc << " vs bar " << bar;
}

void synthesis(Check& c) {
  using namespace mmseq::synth;
  auto run = [](const std::string& name) {
    SynthConfig sc;
    sc.seed = 13;
    sc.metatopics = {"cooking", "travel", "pets", "gardening"};
    sc.topics = {10, 2};
    sc.max_scenario_topics = 40;
    sc.output_dir = fresh(name);
    MockChatClient chat(sc.seed);
    MockMediaClient image(MediaKind::Image, sc.seed), music(MediaKind::Music, sc.seed), speech(MediaKind::Speech, sc.seed);
    run_synthesis(sc, {&chat, {&image, &music, &speech}});
    std::string all;
    for (const char* f : {"dataset.jsonl", "rejected.jsonl", "stats.json"}) all += slurp(sc.output_dir / f);
    std::vector<fs::path> media;
    for (const auto& e : fs::directory_iterator(sc.output_dir / "media")) media.push_back(e.path().filename());
    std::sort(media.begin(), media.end());
    for (const auto& m : media) all += m.string() + slurp(sc.output_dir / "media" / m);
    return all;
  };
  const auto a = run("synth_a"), b = run("synth_b");
  c.expect(!a.empty() && a == b, "two seeded runs differ");

  std::mt19937_64 rng(3);
  const std::vector<std::string> atoms = {"[", "]", "[image:", "[music:", " ", "x", ",", ":", "[[", "\n", "é"};
  std::size_t lossy = 0;
  for (int i = 0; i < 10000; ++i) {
    std::string s;
    for (std::size_t n = rng() % 16; n > 0; --n) s += atoms[rng() % atoms.size()];
    std::string back;
    for (const auto& p : parse_placeholders(s)) back += p.render();
    lossy += back != s;
  }
  c.expect(lossy == 0, std::to_string(lossy) + " placeholder parses were lossy");

  auto dialog = [](std::initializer_list<const char*> turns) {
    Dialogue d;
    d.id = "x";
    Speaker s = Speaker::User;
    for (const char* t : turns) {
      d.turns.push_back({s, parse_placeholders(t), {}});
      s = s == Speaker::User ? Speaker::Agent : Speaker::User;
    }
    return d;
  };
  const FilterRules rules;
  const auto two_music = dialog({"Play me something calm.", "Here. [music: soft piano]", "And another?",
                                 "Sure. [music: slow strings]"});
  const auto four_rounds = dialog({"a?", "b", "c?", "d", "e?", "f", "g?", "h"});
  const auto r = filter_dialogs(std::vector<Dialogue>{two_music, four_rounds}, rules);
  c.expect(r.accepted.empty() && r.rejected.size() == 2, "filter accepted a non-conforming dialog");
  if (r.rejected.size() == 2) {
    c.expect(r.rejected[0].reasons == std::vector<std::string>{"music_count>1"}, "2-music reason is not music_count>1");
    c.expect(r.rejected[1].reasons == std::vector<std::string>{"rounds>3"}, "4-round reason is not rounds>3");
  }

  MockChatClient chat(1);
  std::vector<std::string> metas;
  for (int i = 0; i < 100; ++i) metas.push_back("metatopic " + std::to_string(i));
  const auto topics = expand_topics(metas, chat, {50, 4});
  c.expect(topics.raw_count == 20000, "raw topic count " + std::to_string(topics.raw_count));
  c.notes << topics.raw_count << " raw topics, " << topics.topics.size() << " unique";
}

void end_to_end(Check& c) {
  const auto config = toy_pipeline("e2e");
  const auto train = pipeline::cmd_train(config);
  const auto gen = pipeline::cmd_generate(config, config.paths.prompts, 100);
  c.expect(gen.results.size() == 100, "expected 100 generations");

  // Re-check every generation independently of the report.
  const auto vocab = UnifiedVocab::load(config.paths.vocab);
  std::size_t valid = 0, decoded = 0, media = 0, rejected = 0;
  std::string unexpected;
  std::map<std::string, CodebookSet> books;
  CodecMap codecs;
  for (const auto& m : config.modalities) books.emplace(m.name, load_codebooks(m.codebooks));
  for (const auto& m : config.modalities) codecs[m.name] = ModalityCodec{m.layout, &books.at(m.name)};
  for (const auto& r : gen.results) {
    if (!r.contains("tokens")) continue;
    const auto out = r["tokens"].get<std::vector<TokenId>>();
    const auto prompt_ok = r["valid"].get<bool>();
    if (!prompt_ok) continue;
    ++valid;
    for (const auto& seg : parse_segments(vocab, out)) {
      if (seg.kind != SegmentKind::Modality) continue;
      ++media;
      try {
        const auto f = detokenize(seg, codecs);
        decoded += f.rows() > 0 || seg.payload.empty();
      } catch (const Error& e) {
        // A grammatical stream can still put a code in the wrong layer slot;
        // the de-tokenizer must reject that with a typed error.
        if (e.code() == Errc::LayerRangeViolation || e.code() == Errc::LengthNotDivisible) {
          ++rejected;
        } else if (unexpected.empty()) {
          unexpected = e.what();
        }
      }
    }
  }
  const double rate = static_cast<double>(valid) / 100.0;
  c.expect(rate >= 0.9, "validity rate " + std::to_string(rate));
  c.expect(std::abs(rate - gen.validity_rate) < 1e-12, "report validity rate disagrees with the records");
  c.expect(unexpected.empty(), "de-tokenize failed: " + unexpected);
  c.expect(decoded + rejected == media, std::to_string(media - decoded - rejected) + " media segments decoded to nothing");
  c.notes << "train loss " << train.heldin_loss << ", validity " << rate << ", " << decoded << "/" << media
          << " media segments decoded, " << rejected << " rejected by layer checks";
}

struct Criterion {
  const char* name;
  std::function<void(Check&)> run;
  double limit_seconds;  // 0: no runtime bound
};

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1) g_work = argv[1];
  fs::create_directories(g_work);
  spdlog::set_level(spdlog::level::warn);

  const std::vector<Criterion> criteria = {
      {"token geometry", token_geometry, 1.0},
      {"RVQ properties", rvq_properties, 30.0},
      {"vocabulary laws", vocabulary, 10.0},
      {"template fidelity", template_fidelity, 0.0},
      {"builder/parser roundtrip", builder_parser_roundtrip, 0.0},
      {"LM correctness", lm_correctness, 0.0},
      {"decoding", decoding, 0.0},
      {"two-stage generation", two_stage, 0.0},
      {"synthesis pipeline", synthesis, 0.0},
      {"end to end", end_to_end, 600.0},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto& cr = criteria[i];
    Check check;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cr.run(check);
    } catch (const std::exception& e) {
      check.failures.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (cr.limit_seconds > 0 && secs >= cr.limit_seconds) {
      check.failures.push_back("runtime " + std::to_string(secs) + " s exceeds " + std::to_string(cr.limit_seconds) + " s");
    }
    const bool ok = check.ok();
    failed += !ok;
    std::printf("%s %2zu %-26s %8.2fs", ok ? "PASS" : "FAIL", i + 1, cr.name, secs);
    if (!ok) {
      std::printf("  %s", check.failures.front().c_str());
      if (check.failures.size() > 1) std::printf(" (+%zu more)", check.failures.size() - 1);
    } else if (!check.notes.str().empty()) {
      std::printf("  %s", check.notes.str().c_str());
    }
    std::printf("\n");
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
