#include <array>
#include <fstream>
#include <random>
#include <string>

#include "mmseq/error.hpp"
#include "mmseq/pipeline.hpp"

namespace mmseq::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ToyModality {
  const char* name;
  const char* preset;
  std::uint32_t num_layers;
  std::uint32_t codebook_size;
  std::size_t frames_per_unit;
};

// Small geometries: image 8 tokens, speech 12 semantic tokens, music 5x4 = 20.
constexpr std::array<ToyModality, 3> kToy = {{
    {"image", "image", 1, 16, 8},
    {"speech", "speech", 8, 16, 12},
    {"music", "music", 4, 8, 5},
}};

constexpr std::uint32_t kFrameDim = 8;
constexpr std::size_t kTokenizerFrames = 1536;
constexpr std::size_t kRecords = 32;
constexpr std::size_t kHeldout = 8;

constexpr std::array<const char*, 8> kAdjectives = {"a red", "a calm", "a tiny", "a bright",
                                                    "a slow", "a dark", "a warm", "a loud"};
constexpr std::array<const char*, 6> kNouns = {" cat", " river", " drum", " city", " bird", " storm"};

// Frames scattered around a fixed set of centres, so the quantizers have
// structure to find.
class FrameSource {
 public:
  FrameSource(std::uint64_t seed, std::size_t centres) : rng_(seed) {
    std::normal_distribution<float> wide(0.0f, 2.0f);
    centres_.resize(centres * kFrameDim);
    for (auto& c : centres_) c = wide(rng_);
  }

  Frames draw(std::size_t rows) {
    Frames f(rows, kFrameDim);
    std::uniform_int_distribution<std::size_t> pick(0, centres_.size() / kFrameDim - 1);
    std::normal_distribution<float> noise(0.0f, 0.35f);
    for (std::size_t t = 0; t < rows; ++t) {
      const std::size_t c = pick(rng_);
      for (std::size_t d = 0; d < kFrameDim; ++d) f.data[t * kFrameDim + d] = centres_[c * kFrameDim + d] + noise(rng_);
    }
    return f;
  }

 private:
  std::mt19937_64 rng_;
  std::vector<float> centres_;
};

void write_file(const fs::path& p, const std::string& body) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Errc::Io, "cannot write " + p.string());
  f << body;
}

std::string caption(std::size_t i) {
  return std::string(kAdjectives[i % kAdjectives.size()]) + kNouns[(i / kAdjectives.size()) % kNouns.size()];
}

}  // namespace

fs::path write_toy_corpus(const fs::path& dir, std::uint64_t seed) {
  fs::create_directories(dir / "data");

  std::vector<FrameSource> sources;
  for (std::size_t m = 0; m < kToy.size(); ++m) {
    sources.emplace_back(seed * 31 + m + 1, 24);
    write_file(dir / "data" / (std::string(kToy[m].name) + "_frames.json"),
               frames_to_json(sources.back().draw(kTokenizerFrames)).dump());
  }

  std::string records, heldout, prompts;
  for (std::size_t i = 0; i < kRecords + kHeldout; ++i) {
    const std::size_t m = i % kToy.size();
    const Direction dir_kind = (i / kToy.size()) % 2 == 0 ? Direction::XToText : Direction::TextToX;
    const auto& toy = kToy[m];
    const std::string instruction = default_instructions(toy.name, dir_kind)[i % 2];
    const json frames = frames_to_json(sources[m].draw(toy.frames_per_unit));
    const std::string text = caption(i);
    const bool x_to_text = dir_kind == Direction::XToText;

    const json rec = {{"modality", toy.name},
                      {"direction", x_to_text ? "x_to_text" : "text_to_x"},
                      {"instruction", instruction},
                      {"text", text},
                      {"frames", frames}};
    if (i < kRecords) {
      records += rec.dump() + "\n";
      json p = {{"id", "toy-" + std::to_string(i)}, {"instruction", instruction}};
      if (x_to_text) {
        p["target"] = "text";
        p["modality"] = toy.name;
        p["frames"] = frames;
      } else {
        p["target"] = toy.name;
        p["text"] = text;
      }
      prompts += p.dump() + "\n";
    } else {
      heldout += rec.dump() + "\n";
    }
  }
  write_file(dir / "data" / "records.jsonl", records);
  write_file(dir / "data" / "heldout_records.jsonl", heldout);
  write_file(dir / "data" / "prompts.jsonl", prompts);

  json modalities = json::array();
  for (const auto& toy : kToy) {
    modalities.push_back({{"name", toy.name},
                          {"preset", toy.preset},
                          {"frame_dim", kFrameDim},
                          {"num_layers", toy.num_layers},
                          {"codebook_size", toy.codebook_size},
                          {"frames", std::string("data/") + toy.name + "_frames.json"},
                          {"codebooks", std::string("out/") + toy.name + ".mmtk"}});
  }
  const json config = {
      {"seed", seed},
      {"modalities", modalities},
      {"paths",
       {{"vocab", "out/vocab.json"},
        {"records", "data/records.jsonl"},
        {"heldout_records", "data/heldout_records.jsonl"},
        {"dataset", "out/dataset.jsonl"},
        {"heldout", "out/heldout.jsonl"},
        {"checkpoint", "out/model.mmlm"},
        {"train_log", "out/train_log.jsonl"},
        {"prompts", "data/prompts.jsonl"},
        {"generate_out", "out/generations"},
        {"eval_report", "out/eval.json"}}},
      {"dataset", {{"max_len", 128}, {"pad", false}, {"mask_human_turn", false}}},
      {"model", {{"dim", 48}, {"num_layers", 2}, {"num_heads", 4}, {"max_seq_len", 128}, {"init_std", 0.05}}},
      {"train", {{"peak_lr", 3e-3}, {"warmup_ratio", 0.03}, {"batch_size", 8}, {"steps", 400}, {"clip_norm", 1.0}}},
      {"decode",
       {{"text", {{"max_new_tokens", 40}}},
        {"image", {{"max_new_tokens", 40}}},
        {"speech", {{"max_new_tokens", 40}}},
        {"music", {{"max_new_tokens", 40}}}}},
      {"refiner", {{"iterations", 4}}},
      {"eval", {{"generations", 100}}},
      {"synth",
       {{"metatopics", {"cooking at home", "weekend travel", "learning an instrument", "pets"}},
        {"topics", {{"per_round", 10}, {"rounds", 2}}},
        {"max_scenario_topics", 20},
        {"output_dir", "out/synth"}}},
  };
  const fs::path path = dir / "config.json";
  write_file(path, config.dump(2) + "\n");
  return path;
}

}  // namespace mmseq::pipeline
