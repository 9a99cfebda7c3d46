#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lopt/grpo.hpp"
#include "lopt/model.hpp"
#include "lopt/optim.hpp"
#include "lopt/tasks.hpp"
#include "lopt/trainer.hpp"

namespace lopt {

using Json = nlohmann::ordered_json;

enum class Regime { kSft, kGrpo };
enum class Precision { kFloat32, kFloat64 };

const char* to_string(Regime r);
Regime parse_regime(const std::string& text);
const char* to_string(Precision p);
Precision parse_precision(const std::string& text);

/// E2E warm start that produces the base model before post-training.
/// Each step draws its batch from one task, cycling through the list.
struct PretrainConfig {
  std::vector<TaskSpec> tasks;
  std::size_t steps = 0;
  std::size_t batch_size = 16;
  OptimizerConfig opt;
};

struct ExperimentConfig {
  std::string name = "run";
  ModelConfig model;
  Method method = Method::kLoPT;
  LossConfig loss;
  Regime regime = Regime::kSft;
  TaskSpec task;
  /// Held-out evaluation tasks scored before and after post-training.
  std::vector<TaskSpec> eval_tasks;
  std::size_t eval_examples = 256;
  std::vector<std::uint64_t> seeds{0};
  std::size_t steps = 100;
  std::size_t batch_size = 16;
  OptimizerConfig opt_local;
  OptimizerConfig opt_task;
  GrpoConfig grpo;
  PretrainConfig pretrain;
  Precision precision = Precision::kFloat32;
  /// Record the interface drift increment every step (one extra forward).
  bool measure_interface_drift = false;
  /// Run directory; relative paths resolve against the output root.
  std::string output_dir;

  void validate() const;
};

Json to_json(const ModelConfig& c);
Json to_json(const TaskSpec& t);
Json to_json(const OptimizerConfig& o);
Json to_json(const GrpoConfig& g);
Json to_json(const ExperimentConfig& e);

/// Keys missing from the document keep their defaults; unknown keys are a
/// ConfigError so that typos do not silently fall back.
ModelConfig model_config_from_json(const Json& j);
TaskSpec task_spec_from_json(const Json& j);
ExperimentConfig experiment_from_json(const Json& j);

/// Parses a config file, allowing // and /* */ comments.
Json load_config_document(const std::filesystem::path& path);

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Applies "a.b.c=value" to a config document. The value is parsed as JSON
/// when possible and taken as a string otherwise.
void apply_override(Json& doc, const std::string& assignment);

/// LOPT_OUTPUT_ROOT, or "runs" when unset.
std::filesystem::path default_output_root();

/// Absolute run directory of a config.
std::filesystem::path resolve_output_dir(const ExperimentConfig& config);

}  // namespace lopt
