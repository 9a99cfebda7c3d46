#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lopt/memory.hpp"
#include "lopt/model.hpp"
#include "lopt/objectives.hpp"
#include "lopt/optim.hpp"

namespace lopt {

enum class Method { kE2E, kLoPT, kFreezeK1, kLoPTK4 };

const char* to_string(Method m);
Method parse_method(const std::string& text);

struct TrainerOptions {
  Method method = Method::kLoPT;
  LossConfig loss;
  /// Optimizer for every local block (theta1 plus its aux head).
  OptimizerConfig opt_local;
  /// Optimizer for the final block, and for all parameters under E2E.
  OptimizerConfig opt_task;
  /// Mutation switch for isolation tests. When false the task phase runs the
  /// earlier blocks on its own tape without a stop-gradient.
  bool detach_boundary = true;
  /// Extra no-grad forward per step to measure the interface drift increment.
  bool measure_interface_drift = false;
  /// Snapshot parameters and optimizer state so a failing step rolls back.
  bool atomic = true;

  void validate() const;
};

/// Task loss over logits of one chunk, built on whatever tape the logits live on.
template <typename Real>
using TaskLossFn = std::function<Var<Real>(Var<Real> logits)>;

/// A slice of the step's data that gets its own task-phase tape. Several
/// chunks give per-sample backward with immediate graph release; their
/// losses must already carry their share of the global normalization.
template <typename Real>
struct TaskChunk {
  TokenBatch tokens;
  TaskLossFn<Real> loss;
};

/// Everything one training step consumes.
template <typename Real>
struct StepInput {
  TokenBatch tokens;                // batch used by the local (aux) phase
  std::vector<Real> row_mask;       // 1 for non-padding rows of tokens
  Supervision<Real> local_sup;      // next-token targets for local NTP objectives
  std::vector<TaskChunk<Real>> chunks;
};

struct IsolationFindings {
  /// First-block parameters that received a nonzero task gradient.
  std::vector<std::string> task_grad_in_k1;
  /// Parameters outside a local block that received a local-loss gradient.
  std::vector<std::string> aux_grad_outside;

  bool pass() const { return task_grad_in_k1.empty() && aux_grad_outside.empty(); }
};

struct StepReport {
  std::uint64_t step = 0;
  double task_loss = 0.0;
  double aux_loss = 0.0;   // unweighted reconstruction loss summed over local blocks
  double ntp_loss = 0.0;   // unweighted local next-token loss, when used
  double grad_norm_k1 = 0.0;
  double grad_norm_k2 = 0.0;
  /// eta1 * ||grad_theta1 (lambda * L_aux)||, the per-step term of the drift ledger.
  double drift_bound_increment = 0.0;
  std::optional<double> interface_drift;
  double wall_ms = 0.0;
  IsolationFindings isolation;
  memory::PhaseProfile memory;
};

/// Owns a model, its local heads and optimizers, and runs training steps.
template <typename Real>
class Trainer {
 public:
  Trainer(Transformer<Real> model, TrainerOptions options, std::uint64_t seed);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainerOptions& options() const { return options_; }
  Transformer<Real>& model() { return model_; }
  const Transformer<Real>& model() const { return model_; }
  /// One reconstruction head per local block (empty for E2E and NTP-only).
  std::vector<AuxHead<Real>>& aux_heads() { return aux_; }
  const std::vector<AuxHead<Real>>& aux_heads() const { return aux_; }
  LocalDecoder<Real>* local_decoder() { return decoder_ ? &*decoder_ : nullptr; }
  const LocalDecoder<Real>* local_decoder() const { return decoder_ ? &*decoder_ : nullptr; }
  std::vector<Optimizer<Real>>& optimizers() { return opts_; }
  const std::vector<Optimizer<Real>>& optimizers() const { return opts_; }
  std::uint64_t steps_taken() const { return step_; }
  /// Checkpoint restore only.
  void set_steps_taken(std::uint64_t s) { step_ = s; }

  /// Runs one full step; on any error every parameter and optimizer state is
  /// restored (when options.atomic) before the exception propagates.
  StepReport step(const StepInput<Real>& input);

  /// Runs both phases' forward/backward without updating anything and
  /// reports which exclusion properties were violated.
  IsolationFindings isolation_check(const StepInput<Real>& input);

  /// Task loss of the current parameters with no graph recorded.
  double evaluate(const std::vector<TaskChunk<Real>>& chunks) const;

 private:
  struct Snapshot;
  Snapshot snapshot() const;
  void restore(const Snapshot& s);

  std::size_t num_local_blocks() const;
  /// Parameters updated by the local phase of block b.
  std::vector<const Parameter<Real>*> local_group(std::size_t b) const;
  std::vector<const Parameter<Real>*> all_trainable() const;

  /// Output of blocks [0, b) computed without a graph (b > 0).
  Tensor<Real> block_input_values(const TokenBatch& tokens, std::size_t b) const;

  struct LocalResult {
    GradStore<Real> grads;
    double recon = 0.0, ntp = 0.0;
  };
  LocalResult local_phase(const StepInput<Real>& input, std::size_t b);

  struct TaskResult {
    GradStore<Real> grads;
    double loss = 0.0;
  };
  TaskResult task_phase(const std::vector<TaskChunk<Real>>& chunks, bool full_graph, memory::PhaseProfile* profile);

  void check_local(const GradStore<Real>& g, std::size_t b, IsolationFindings& out) const;
  void check_task(const GradStore<Real>& g, IsolationFindings& out) const;

  Transformer<Real> model_;
  TrainerOptions options_;
  std::vector<AuxHead<Real>> aux_;
  std::optional<LocalDecoder<Real>> decoder_;
  std::vector<Optimizer<Real>> opts_;
  std::uint64_t step_ = 0;
};

/// Builds the next-token supervision of a padded batch: position t predicts
/// token t+1, and only positions whose target is a non-pad token listed in
/// loss_from onwards count. prompt_lens[i] gives the number of prompt tokens
/// of row i; predictions of prompt tokens are excluded when it is nonzero.
template <typename Real>
Supervision<Real> next_token_supervision(const TokenBatch& tokens, int pad_id,
                                         const std::vector<std::size_t>& prompt_lens = {});

/// 1 for rows whose token is not pad.
template <typename Real>
std::vector<Real> non_padding_rows(const TokenBatch& tokens, int pad_id);

/// Standard SFT step input: one chunk with the mean NLL over sup.
template <typename Real>
StepInput<Real> make_sft_input(const TokenBatch& tokens, const Supervision<Real>& sup, int pad_id);

}  // namespace lopt
