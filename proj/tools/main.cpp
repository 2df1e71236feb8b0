#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "guided_attn/cli/commands.hpp"
#include "guided_attn/common/errors.hpp"

namespace fs = std::filesystem;
using namespace guided_attn;

namespace {

template <typename Config>
Config load(const fs::path& path) {
  try {
    return cli::read_config(path).get<Config>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config " + path.string() + ": " + e.what());
  }
}

int dispatch(int argc, char** argv) {
  CLI::App app{"Localization-guided attention with clinical modulation on synthetic DCE phantoms"};
  app.set_version_flag("--version", cli::version());
  app.require_subcommand(1);

  std::string config_path;
  bool force = false;
  auto* generate = app.add_subcommand("generate", "Generate and preprocess the phantom cohorts");
  generate->add_option("--config", config_path, "JSON config")->required();
  generate->add_flag("--force", force, "Replace a non-empty output directory");

  std::optional<int> stage;
  std::string resume;
  auto* train = app.add_subcommand("train", "Stepwise training on a manifest");
  train->add_option("--config", config_path, "JSON config")->required();
  train->add_option("--stage", stage, "Train this stage only")->check(CLI::Range(1, 3));
  train->add_option("--resume", resume, "Checkpoint to start from");

  std::size_t jobs = 1;
  auto* experiment = app.add_subcommand("experiment", "Leave-one-cohort-out comparison of all approaches");
  experiment->add_option("--config", config_path, "JSON config")->required();
  experiment->add_option("--jobs", jobs, "Scenario x seed cells run in parallel")->check(CLI::PositiveNumber);

  std::string ckpt, manifest, out;
  std::vector<std::string> patients;
  auto* export_attention = app.add_subcommand("export-attention", "Write attention maps and slice images");
  export_attention->add_option("--ckpt", ckpt, "Stage 2 or 3 checkpoint")->required();
  export_attention->add_option("--manifest", manifest, "Patient manifest")->required();
  export_attention->add_option("--out", out, "Output directory")->required();
  export_attention->add_option("--patients", patients, "Restrict to these patient ids")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  const auto env_seed = cli::seed_from_env();
  if (*generate) {
    auto cfg = load<cli::GenerateConfig>(config_path);
    if (env_seed) cfg.seed = *env_seed;
    const auto s = cli::run_generate(cfg, force);
    std::cout << "wrote " << s.patients << " patients to " << s.manifest.string() << '\n';
  } else if (*train) {
    auto cfg = load<cli::TrainConfig>(config_path);
    if (env_seed) cfg.seed = *env_seed;
    std::optional<fs::path> resume_path;
    if (!resume.empty()) resume_path = resume;
    const auto s = cli::run_train(cfg, stage, resume_path);
    for (const auto& p : s.checkpoints) std::cout << "checkpoint " << p.string() << '\n';
  } else if (*experiment) {
    auto cfg = load<cli::ExperimentRunConfig>(config_path);
    if (env_seed) {
      // The data seed and the run seeds all move with the override.
      cfg.experiment.data_seed = *env_seed;
      for (std::size_t i = 0; i < cfg.experiment.seeds.size(); ++i) cfg.experiment.seeds[i] = *env_seed + i;
    }
    const auto s = cli::run_experiment(cfg, jobs);
    std::cout << "wrote " << s.rows << " rows to " << s.table.string() << '\n';
  } else if (*export_attention) {
    const auto s = cli::run_export_attention(ckpt, manifest, out, patients);
    std::cout << "exported " << s.patients << " patients, index " << s.index.string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const DataError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const NumericalError& e) {
    spdlog::error("{}", e.what());
    return 3;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
}
