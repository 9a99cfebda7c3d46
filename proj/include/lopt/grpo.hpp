#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lopt/tasks.hpp"
#include "lopt/trainer.hpp"

namespace lopt {

struct GrpoConfig {
  std::size_t group_size = 4;       // G
  std::size_t prompts_per_step = 4; // B
  double clip_eps = 0.2;
  /// 0 selects greedy (argmax) decoding.
  double temperature = 0.7;
  double top_p = 0.95;
  std::size_t max_new_tokens = 8;
  double std_eps = 1e-8;
  /// One task tape per rollout, released right after its backward.
  bool per_sample_backward = false;

  void validate() const;
};

struct Rollout {
  std::vector<int> response;     // sampled ids, including eos when produced
  std::vector<double> old_logp;  // log pi_old(token), one per response id
  bool truncated = false;        // hit max_new_tokens without eos
  double reward = 0.0;
  double advantage = 0.0;
};

struct RolloutGroup {
  std::vector<int> prompt;  // bos + prompt ids
  long long answer = 0;
  std::vector<Rollout> samples;
};

/// Uniform double in [0, 1) from the top 53 bits of one draw.
double uniform01(std::mt19937_64& rng);

/// Draws one token from logits. temperature 0 is argmax (lowest id on ties);
/// otherwise softmax(logits / temperature), then the smallest set of tokens,
/// sorted by probability and then id, whose mass reaches top_p, renormalized.
template <typename Real>
int sample_token(std::span<const Real> logits, double temperature, double top_p, double u);

/// Samples G responses for each prompt from the frozen policy. old_logp holds
/// the untempered log-probability of each chosen token.
template <typename Real>
std::vector<RolloutGroup> sample_rollouts(const Transformer<Real>& model, const std::vector<Example>& prompts,
                                          const GrpoConfig& cfg, std::uint64_t seed,
                                          const Tokenizer& tok = default_tokenizer());

/// First integer in text: optional '-' immediately before a maximal digit run.
std::optional<long long> parse_first_integer(const std::string& text);

/// 1 iff the first integer in the decoded response equals answer.
double exact_match_reward(const std::string& response, long long answer);

/// Fills reward for every sample of every group.
void compute_rewards(std::vector<RolloutGroup>& groups, const Tokenizer& tok = default_tokenizer());

/// (r_i - mean) / (population std + std_eps).
std::vector<double> normalize_advantages(std::span<const double> rewards, double std_eps);

void assign_advantages(std::vector<RolloutGroup>& groups, double std_eps);

/// -(1 / G) sum_i (1 / |o_i|) sum_t min(r A, clip(r) A) on flat per-token
/// arrays; lengths[i] gives |o_i| and the arrays are the concatenation.
double grpo_clipped_loss(std::span<const double> new_logp, std::span<const double> old_logp,
                         std::span<const double> advantages, std::span<const std::size_t> lengths, double eps);

/// Step input for a GRPO update: the aux phase sees all non-padding tokens of
/// every rollout; the task phase is the clipped loss with weight
/// 1 / (|o_i| G B) per response token.
template <typename Real>
StepInput<Real> make_grpo_input(const std::vector<RolloutGroup>& groups, const GrpoConfig& cfg);

struct GrpoStepReport {
  StepReport step;
  double mean_reward = 0.0;
  std::size_t truncated = 0;
};

/// One policy step: sample, score, normalize, update.
template <typename Real>
GrpoStepReport grpo_step(Trainer<Real>& trainer, const std::vector<Example>& prompts, const GrpoConfig& cfg,
                         std::uint64_t seed);

}  // namespace lopt
