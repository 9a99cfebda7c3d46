#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lopt/config.hpp"
#include "lopt/diagnostics.hpp"
#include "lopt/instrumentation.hpp"

namespace lopt {

/// One line of steps.jsonl. New fields go at the end.
struct StepRecord {
  std::uint64_t step = 0;
  double task_loss = 0.0;
  double aux_loss = 0.0;
  double ntp_loss = 0.0;
  double grad_norm_k1 = 0.0;
  double grad_norm_k2 = 0.0;
  double drift_bound_increment = 0.0;
  std::optional<double> interface_drift;
  double modeled_peak_bytes = 0.0;
  std::size_t measured_peak_bytes = 0;
  std::size_t isolation_violations = 0;
  std::optional<double> mean_reward;  // grpo only
  double wall_ms = 0.0;               // written to timing.jsonl, not steps.jsonl
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<StepRecord> steps;
  DriftReport drift;
  /// Mean next-token loss on each eval task, keyed by eval_task_key().
  std::map<std::string, double> eval_before, eval_after;
  /// Sampled exact-match reward on a fixed prompt set (grpo only).
  std::optional<double> reward_before, reward_after;
  MemoryLedger ledger;
  MeasuredPeak measured;
  double pretrain_ms = 0.0;
  double train_ms = 0.0;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::filesystem::path dir;
  std::vector<SeedResult> seeds;
};

/// "addition/heldout" style key.
std::string eval_task_key(const TaskSpec& t);

/// Mean next-token loss over the target tokens of examples, no graph.
template <typename Real>
double heldout_loss(const Transformer<Real>& model, const std::vector<Example>& examples, std::size_t batch_size = 64);

/// Mean exact-match reward of G sampled responses per prompt.
template <typename Real>
double sampled_reward(const Transformer<Real>& model, const std::vector<Example>& prompts, const GrpoConfig& cfg,
                      std::uint64_t seed);

/// E2E warm start described by config.pretrain, starting from init.
template <typename Real>
Transformer<Real> pretrain_base(const ExperimentConfig& config, Transformer<Real> init, std::uint64_t seed);

/// Runs one seed in memory. Artifacts are written only when dir is given.
template <typename Real>
SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed,
                    const std::optional<std::filesystem::path>& dir = std::nullopt);

/// All seeds, with steps.jsonl, timing.jsonl, drift.tsv, memory.json and
/// checkpoints per seed plus config.json and summary.json at the top. A
/// failing seed leaves a FAILED file with the error and rethrows.
ExperimentResult run_experiment(const ExperimentConfig& config);

Json step_record_json(const StepRecord& r);
Json summary_json(const ExperimentResult& result);

/// Column order: layer, delta_total, delta_attn, delta_mlp. Undefined
/// entries are written as "nan".
std::string drift_tsv(const DriftReport& report);

/// Header-only summary for a run with no seeds finished.
Json empty_summary(const ExperimentConfig& config);

}  // namespace lopt
