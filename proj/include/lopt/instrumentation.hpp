#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "lopt/model.hpp"
#include "lopt/trainer.hpp"

namespace lopt {

/// Modeled training-memory terms, in bytes.
struct MemoryLedger {
  double A1 = 0.0;          // first block activations, embedding included
  double A2 = 0.0;          // second block activations, head and loss included
  double Ag = 0.0;          // reconstruction head and its loss
  double A_boundary = 0.0;  // detached boundary buffer
  double M_state = 0.0;     // parameters, gradients, optimizer moments
  double M_misc = 0.0;      // step-invariant overhead (rollback snapshot)

  double activation_total() const { return A1 + A2; }
};

enum class PeakMode { kE2E, kLoPT };

const char* to_string(PeakMode m);
PeakMode parse_peak_mode(const std::string& text);

struct FootprintOptions {
  /// Decides which parameters and optimizers M_state counts; the activation
  /// terms do not depend on it.
  PeakMode mode = PeakMode::kLoPT;
  std::size_t element_bytes = 4;
  /// Moments per parameter kept by an optimizer (AdamW 2, SGD 0). The local
  /// value applies to the first block and aux head under LoPT.
  std::size_t optimizer_moments = 2;
  std::size_t local_optimizer_moments = 2;
  /// Model the atomic-step snapshot of parameters and optimizer state.
  bool atomic_snapshot = true;
  /// Keep only layer inputs inside each block, plus one layer's working set
  /// for the recompute during backward.
  bool gradient_checkpointing = false;
};

/// Saved elements per token of one transformer layer as recorded on the tape.
std::size_t layer_activation_elems_per_token(const ModelConfig& config, std::size_t seq);
/// Final norm, logits and next-token loss per token.
std::size_t head_activation_elems_per_token(const ModelConfig& config);
/// Reconstruction head, stop-gradient target and masked MSE per token.
std::size_t aux_activation_elems_per_token(std::size_t d_model);

/// Closed-form ledger for one step on a batch x seq token block with the
/// default two-way split.
MemoryLedger model_activation_footprint(const ModelConfig& config, std::size_t batch, std::size_t seq,
                                        const FootprintOptions& options = {});

/// e2e: M_state + A1 + A2 + M_misc.
/// lopt: M_state + max(A1 + Ag, A2 + A_boundary) + M_misc.
double compare_peak_models(const MemoryLedger& ledger, PeakMode mode);

/// Modeled flops of one step.
struct ComputeLedger {
  double C_F1 = 0.0, C_F2 = 0.0;
  double C_B1_task = 0.0, C_B2_task = 0.0;
  double C_B1_aux = 0.0;
  double C_g = 0.0;  // reconstruction head forward plus backward
};

/// Matmul-dominated flop model: a layer costs 24 d^2 + 4 seq d per token
/// forward, backward costs twice the forward.
ComputeLedger model_compute(const ModelConfig& config, std::size_t batch, std::size_t seq);

/// C_LoPT - C_E2E = C_B1_aux + C_g - C_B1_task. Negative means LoPT is
/// modeled cheaper. The boundary recompute of the implemented step is not
/// part of this difference.
double compare_compute(const ComputeLedger& ledger);

/// Per-phase maximum over a run of measured live-byte peaks.
struct MeasuredPeak {
  std::size_t overall = 0;
  std::map<std::string, std::size_t> by_phase;
};

MeasuredPeak measured_high_water(const std::vector<StepReport>& run);

}  // namespace lopt
