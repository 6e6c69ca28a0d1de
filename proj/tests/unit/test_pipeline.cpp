#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mmseq/error.hpp"
#include "mmseq/pipeline.hpp"
#include "mmseq/stream_parser.hpp"
#include "oracles.hpp"

using namespace mmseq;
using namespace mmseq::pipeline;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json(const fs::path& p) {
  std::ifstream f(p);
  return json::parse(f);
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream f(p);
  f << j.dump(2);
}

// Toy corpus with tokenizers trained; returns the config path.
fs::path toy_with_tokenizers(const std::string& name) {
  const auto dir = oracle::scratch(name);
  const auto path = write_toy_corpus(dir, 4);
  const auto config = PipelineConfig::load(path);
  for (const auto& m : config.modalities) cmd_train_tokenizer(config, m.name);
  return path;
}

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::Io;  // sentinel: nothing thrown
}

}  // namespace

TEST_CASE("toy config loads and resolves paths against its directory") {
  const auto dir = oracle::scratch("toy_load");
  const auto path = write_toy_corpus(dir, 0);
  const auto c = PipelineConfig::load(path);
  REQUIRE(c.modalities.size() == 3);
  CHECK(c.modality("speech").rvq.num_layers == 8);
  CHECK(c.modality("speech").layout.scheme == MediaScheme::SemanticOnly);
  CHECK(c.paths.records == dir / "data/records.jsonl");
  CHECK(c.strategy_for("music").repetition_penalty == doctest::Approx(1.15));
  CHECK(c.strategy_for("music").top_p == 1.0);
  CHECK(code_of([&] { c.modality("video"); }) == Errc::UnknownModality);

  const auto vocab = c.build_vocab();
  CHECK(vocab.entries().size() == 3);
  CHECK(vocab.total_size() == 256 + 16 + 16 + 4 * 8 + 3 * 2 + 5);

  auto s = c;
  s.override_seed(77);
  CHECK(s.seed == 77);
  CHECK(s.model.seed == 77);
  CHECK(s.train.seed == 77);
  for (const auto& m : s.modalities) CHECK(m.rvq.seed == 77);
}

TEST_CASE("config errors are configuration errors") {
  const auto dir = oracle::scratch("bad_config");
  CHECK(code_of([&] { PipelineConfig::load(dir / "missing.json"); }) == Errc::InvalidConfig);
  const auto path = write_toy_corpus(dir, 0);
  auto j = read_json(path);
  j["decode"].erase("music");
  write_json(path, j);
  CHECK(PipelineConfig::load(path).strategy_for("music").repetition_penalty == doctest::Approx(1.15));  // default
  j["decode"]["music"] = {{"top_p", 0.0}};
  write_json(path, j);
  CHECK(code_of([&] { PipelineConfig::load(path); }) == Errc::InvalidConfig);
  j["decode"]["music"] = {{"top_p", 1.0}};
  j["train"]["steps"] = "many";
  write_json(path, j);
  CHECK(code_of([&] { PipelineConfig::load(path); }) == Errc::InvalidConfig);

  const auto path2 = write_toy_corpus(dir, 0);
  auto j2 = read_json(path2);
  j2["modalities"][0]["frames"] = "data/nope.json";
  write_json(path2, j2);
  const auto c = PipelineConfig::load(path2);
  CHECK(code_of([&] { cmd_train_tokenizer(c, "image"); }) == Errc::InvalidConfig);
}

TEST_CASE("speech preset tokenizer reloads bit-exact") {
  const auto dir = oracle::scratch("speech_preset");
  const auto path = write_toy_corpus(dir, 0);
  auto j = read_json(path);
  j["modalities"][1].erase("num_layers");
  j["modalities"][1].erase("codebook_size");
  write_json(path, j);
  const auto c = PipelineConfig::load(path);
  CHECK(c.modality("speech").rvq.num_layers == 8);
  CHECK(c.modality("speech").rvq.codebook_size == 1024);
  // Enough frames for K=1024.
  write_json(c.modality("speech").frames, frames_to_json(oracle::gaussian_frames(2048, 8, 3)));
  const auto r = cmd_train_tokenizer(c, "speech");
  const auto books = load_codebooks(r.path);
  CHECK(books.layers() == 8);
  CHECK(books.entries() == 1024);
  const auto again = load_codebooks(r.path);
  CHECK(again.data == books.data);
  for (std::size_t i = 1; i < r.layer_errors.size(); ++i) CHECK(r.layer_errors[i] <= r.layer_errors[i - 1]);
}

TEST_CASE("build-dataset conserves loss tokens and validates") {
  const auto path = toy_with_tokenizers("build");
  const auto c = PipelineConfig::load(path);
  const auto r = cmd_build_dataset(c);
  CHECK(r.records == 32);
  CHECK(r.skipped == 0);
  CHECK(r.samples == 32);
  CHECK(r.loss_tokens == r.sample_tokens);
  CHECK(r.histogram.contains("speech"));

  const auto vocab = UnifiedVocab::load(c.paths.vocab);
  const auto seqs = read_sequences(c.paths.dataset);
  CHECK(seqs.size() == r.sequences);
  std::size_t total = 0;
  for (const auto& s : seqs) {
    CHECK(s.size() <= c.dataset.max_len);
    CHECK(validate(vocab, s.tokens).empty());
    total += s.size();
  }
  CHECK(total == r.sample_tokens);
  CHECK(fs::exists(c.paths.heldout));

  // Deterministic and leaves the inputs alone.
  const auto before = fs::last_write_time(c.paths.records);
  const auto r2 = cmd_build_dataset(c);
  CHECK(r2.to_json() == r.to_json());
  CHECK(fs::last_write_time(c.paths.records) == before);
}

TEST_CASE("build-dataset with three pair records and padding") {
  const auto path = toy_with_tokenizers("build_three");
  auto c = PipelineConfig::load(path);
  std::ifstream in(c.paths.records);
  std::string all, line;
  for (int i = 0; i < 3 && std::getline(in, line); ++i) all += line + "\n";
  in.close();
  std::ofstream(c.paths.records) << all;
  c.dataset.pad = true;
  const auto r = cmd_build_dataset(c);
  CHECK(r.samples == 3);
  CHECK(r.loss_tokens == r.sample_tokens);
  for (const auto& s : read_sequences(c.paths.dataset)) CHECK(s.size() == c.dataset.max_len);
}

TEST_CASE("invalid records are skipped with a warning count") {
  const auto path = toy_with_tokenizers("build_invalid");
  const auto c = PipelineConfig::load(path);
  {
    std::ofstream out(c.paths.records, std::ios::app);
    out << R"({"modality":"image","direction":"x_to_text","text":"x","codes":[[99]]})" << "\n";
    out << R"({"modality":"video","text":"x","codes":[[1]]})" << "\n";
    out << "not json\n";
  }
  const auto r = cmd_build_dataset(c);
  CHECK(r.records == 35);
  CHECK(r.skipped == 3);
  CHECK(r.samples == 32);
}

TEST_CASE("mixture weights on one dataset draw only from it") {
  const auto path = toy_with_tokenizers("build_mixture");
  auto c = PipelineConfig::load(path);
  c.dataset.num_samples = 20;
  c.dataset.mixture.weights = {{"music_text", 1.0}, {"image_text", 0.0}};
  const auto r = cmd_build_dataset(c);
  CHECK(r.samples == 20);
  REQUIRE(r.samples_per_dataset.size() == 1);
  CHECK(r.samples_per_dataset.at("music_text") == 20);
  CHECK(r.histogram.contains("music"));
  CHECK(!r.histogram.contains("image"));
}

TEST_CASE("eval on a fresh model reports a valid schema") {
  const auto path = toy_with_tokenizers("eval_fresh");
  auto c = PipelineConfig::load(path);
  cmd_build_dataset(c);
  // One training step is enough to produce a checkpoint.
  c.train.steps = 1;
  c.eval_generations = 6;
  cmd_train(c);
  const auto report = cmd_eval(c);
  CHECK(report["refiner"]["exact"] == true);
  CHECK(report["lm"].contains("perplexity"));
  CHECK(report["validity"]["generations"] == 6);
  const double rate = report["validity"]["rate"];
  CHECK(rate >= 0.0);
  CHECK(rate <= 1.0);
  for (const char* m : {"image", "speech", "music"}) CHECK(report["rvq"][m]["non_increasing"] == true);
  CHECK(fs::exists(c.paths.eval_report));
}

TEST_CASE("missing codebooks are reported") {
  const auto dir = oracle::scratch("no_books");
  const auto c = PipelineConfig::load(write_toy_corpus(dir, 0));
  const auto r = cmd_build_dataset(c);
  CHECK(r.skipped == r.records);
  CHECK(r.heldout_skipped == 8);
  CHECK(r.samples == 0);
}
