#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lopt/model.hpp"

namespace lopt {

enum class OptimizerKind { kAdamW, kSgd };

const char* to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(const std::string& text);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdamW;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Global-norm clipping threshold; no clipping when unset.
  std::optional<double> max_grad_norm;

  void validate() const;
};

struct OptimizerStepStats {
  double grad_norm = 0.0;  // global norm before clipping
  bool clipped = false;
};

/// AdamW (decoupled weight decay) or plain SGD over a fixed parameter group.
/// The optimizer holds pointers into the model; copying it snapshots the
/// moment estimates and step counter, which is how steps are made atomic.
template <typename Real>
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<Parameter<Real>*> group);

  const OptimizerConfig& config() const { return config_; }
  OptimizerConfig& config() { return config_; }
  const std::vector<Parameter<Real>*>& group() const { return group_; }
  std::uint64_t step_count() const { return step_; }

  /// Every parameter in the group must have a gradient in grads.
  OptimizerStepStats step(const GradStore<Real>& grads);

  /// Exposed for checkpointing: moments in group order.
  std::vector<Tensor<Real>>& first_moments() { return m_; }
  std::vector<Tensor<Real>>& second_moments() { return v_; }
  const std::vector<Tensor<Real>>& first_moments() const { return m_; }
  const std::vector<Tensor<Real>>& second_moments() const { return v_; }
  void set_step_count(std::uint64_t s) { step_ = s; }

  /// Bytes of optimizer state (two moments per parameter under AdamW).
  std::size_t state_bytes() const;

 private:
  OptimizerConfig config_;
  std::vector<Parameter<Real>*> group_;
  std::vector<Tensor<Real>> m_, v_;
  std::uint64_t step_ = 0;
};

/// Global L2 norm of the gradients of the listed parameters that are present.
template <typename Real>
double grad_norm(const GradStore<Real>& grads, const std::vector<const Parameter<Real>*>& params);

}  // namespace lopt
