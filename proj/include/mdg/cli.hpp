#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdg/diffusion.hpp"
#include "mdg/pipeline.hpp"
#include "mdg/synthgui.hpp"

namespace mdg {

/// Everything a command needs; a run is reproducible from this alone.
struct RunConfig {
  std::string name = "default";
  /// Master seed. Dataset, eval split, initialization and shuffling seeds derive from it.
  std::uint64_t seed = 0;

  DatasetConfig dataset;
  int eval_samples = 500;

  ModelConfig model;
  MaskSchedule schedule;
  TrainConfig training;

  /// Held-out samples scored after every training epoch; 0 disables.
  int heldout_samples = 0;

  InferenceConfig inference;
  HybridInferenceConfig hybrid;
  std::vector<InferenceConfig> sweep_grid = {{8, 64, 64, 0.95}, {16, 64, 64, 0.95}, {32, 64, 64, 0.95}, {64, 64, 64, 0.95}};

  /// Relative paths resolve against the run directory.
  struct Paths {
    std::string train_data = "data/train.synthgui";
    std::string eval_data = "data/eval.synthgui";
    /// Empty: checkpoints/<schedule>.ckpt.
    std::string checkpoint;
    std::string linear_checkpoint = "checkpoints/linear.ckpt";
    std::string hybrid_checkpoint = "checkpoints/hybrid.ckpt";
    /// Extra named eval splits for `compare`, as name -> dataset file.
    std::vector<std::pair<std::string, std::string>> extra_splits;
  } paths;

  std::uint64_t dataset_seed() const;
  std::uint64_t eval_seed() const;
  std::uint64_t init_seed() const;
  std::uint64_t train_seed() const;

  /// Dataset config for the train or held-out split.
  DatasetConfig split_config(bool eval) const;

  /// Throws ConfigError.
  void validate(const ResponseTemplate& tmpl) const;
};

class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

nlohmann::json to_json(const RunConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected with ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// FNV-1a over the canonical JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& j);
std::string file_digest(const std::filesystem::path& path);

/// `steps=8,16,32,64;gen=64;block=64,32`: the cartesian product, invalid combinations rejected.
std::vector<InferenceConfig> parse_grid(const std::string& spec, double threshold);

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitData = 3, kExitNumeric = 4 };

/// Entry point shared by the executable and the tests.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mdg
