// Command-line front end. Exit codes: 0 success, 1 runtime failure,
// 2 configuration or usage error.

#include <spdlog/spdlog.h>

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mmseq/error.hpp"
#include "mmseq/pipeline.hpp"

namespace {

namespace pl = mmseq::pipeline;
using nlohmann::json;

constexpr int kRuntimeFailure = 1;
constexpr int kUsageError = 2;

bool is_config_error(mmseq::Errc code) {
  return code == mmseq::Errc::InvalidConfig || code == mmseq::Errc::UnknownModality;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal discrete-token pipeline"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand

  std::string config_path = "config.json";
  std::optional<std::uint64_t> seed;
  std::string log_level = "info";
  app.add_option("--config", config_path, "Pipeline config (JSON)");
  app.add_option("--seed", seed, "Override every seed in the config");
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  auto* tok = app.add_subcommand("train-tokenizer", "Train RVQ codebooks for one modality");
  std::string modality;
  tok->add_option("--modality", modality, "Configured modality name")->required();

  auto* build = app.add_subcommand("build-dataset", "Tokenize records, apply templates, pack");
  auto* train = app.add_subcommand("train", "Train the language model");

  auto* gen = app.add_subcommand("generate", "Generate, parse and de-tokenize");
  std::string prompts;
  std::size_t count = 0;
  gen->add_option("--prompts", prompts, "Prompt JSONL (default: paths.prompts)");
  gen->add_option("--count", count, "Number of generations, cycling through prompts (default: one per prompt)");

  auto* synth = app.add_subcommand("synth", "Synthesize instruction dialogs");
  auto* eval = app.add_subcommand("eval", "Write the evaluation report");

  auto* toy = app.add_subcommand("toy-corpus", "Write a small synthetic corpus and its config");
  std::string toy_dir = "toy";
  toy->add_option("--out", toy_dir, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsageError;
  }

  spdlog::set_level(spdlog::level::from_str(log_level));
  spdlog::set_pattern("[%l] %v");

  try {
    if (toy->parsed()) {
      const auto path = pl::write_toy_corpus(toy_dir, seed.value_or(0));
      std::cout << path.string() << "\n";
      return 0;
    }

    auto config = pl::PipelineConfig::load(config_path);
    if (seed) config.override_seed(*seed);

    if (tok->parsed()) {
      const auto r = pl::cmd_train_tokenizer(config, modality);
      std::cout << json{{"codebooks", r.path.string()},
                        {"layers", r.config.num_layers},
                        {"entries", r.config.codebook_size},
                        {"layer_errors", r.layer_errors}}
                       .dump(2)
                << "\n";
    } else if (build->parsed()) {
      const auto r = pl::cmd_build_dataset(config);
      std::cout << r.to_json().dump(2) << "\n";
    } else if (train->parsed()) {
      const auto r = pl::cmd_train(config);
      std::cout << json{{"steps", r.steps},
                        {"first_loss", r.first_loss},
                        {"final_loss", r.final_loss},
                        {"heldin_loss", r.heldin_loss},
                        {"checkpoint", r.checkpoint.string()}}
                       .dump(2)
                << "\n";
    } else if (gen->parsed()) {
      const auto path = prompts.empty() ? config.paths.prompts : std::filesystem::path(prompts);
      const auto r = pl::cmd_generate(config, path, count);
      std::cout << json{{"generations", r.results.size()}, {"validity_rate", r.validity_rate}}.dump(2) << "\n";
    } else if (synth->parsed()) {
      std::cout << pl::cmd_synth(config).dump(2) << "\n";
    } else if (eval->parsed()) {
      std::cout << pl::cmd_eval(config).dump(2) << "\n";
    }
  } catch (const mmseq::Error& e) {
    spdlog::error("{}", e.what());
    return is_config_error(e.code()) ? kUsageError : kRuntimeFailure;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kRuntimeFailure;
  }
  return 0;
}
