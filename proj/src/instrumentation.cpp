#include "lopt/instrumentation.hpp"

#include <algorithm>

#include "lopt/errors.hpp"
#include "lopt/objectives.hpp"

namespace lopt {

std::size_t layer_activation_elems_per_token(const ModelConfig& c, std::size_t seq) {
  // 29d covers the norms, projections, residuals and MLP; each head keeps
  // four seq-long score rows (raw, scaled, masked, softmax).
  return 29 * c.d_model + 4 + 4 * c.n_heads * seq;
}

std::size_t head_activation_elems_per_token(const ModelConfig& c) {
  return c.d_model + 2 + 2 * c.vocab_size + 1;
}

std::size_t aux_activation_elems_per_token(std::size_t d) { return 4 * d + 2 + 3 * d / 4; }

MemoryLedger model_activation_footprint(const ModelConfig& config, std::size_t batch, std::size_t seq,
                                        const FootprintOptions& options) {
  config.validate();
  if (seq == 0 || batch == 0) return {};
  const double bytes = static_cast<double>(options.element_bytes);
  const double tokens = static_cast<double>(batch * seq);
  const std::size_t d = config.d_model;
  const std::size_t s = config.resolved_split();
  const std::size_t n2 = config.n_layers - s;
  const double layer = static_cast<double>(layer_activation_elems_per_token(config, seq));

  auto block = [&](std::size_t layers) {
    if (layers == 0) return 0.0;
    if (!options.gradient_checkpointing) return layer * static_cast<double>(layers);
    return static_cast<double>(d * layers) + layer;
  };

  MemoryLedger m;
  m.A1 = bytes * tokens * (static_cast<double>(d) + block(s));
  m.A2 = bytes * tokens * (block(n2) + static_cast<double>(head_activation_elems_per_token(config)));
  m.Ag = bytes * tokens * static_cast<double>(aux_activation_elems_per_token(d));
  m.A_boundary = bytes * tokens * static_cast<double>(d);

  const double head = config.share_tied_tensor ? 0.0 : static_cast<double>(config.vocab_size * d);
  const double p1 = static_cast<double>(config.vocab_size * d + s * layer_param_count(d));
  const double p2 = static_cast<double>(n2 * layer_param_count(d) + 2 * d) + head;
  const double task_moments = static_cast<double>(options.optimizer_moments);
  double state = 0.0;  // elements of optimizer moments
  double params = p1 + p2;
  if (options.mode == PeakMode::kE2E) {
    state = (p1 + p2) * task_moments;
  } else {
    const double aux = static_cast<double>(aux_head_param_count(d));
    params += aux;
    state = (p1 + aux) * static_cast<double>(options.local_optimizer_moments) + p2 * task_moments;
  }
  // Parameters, one gradient per parameter, then the moments.
  m.M_state = bytes * (2.0 * params + state);
  m.M_misc = options.atomic_snapshot ? bytes * (params + state) : 0.0;
  return m;
}

const char* to_string(PeakMode m) { return m == PeakMode::kE2E ? "e2e" : "lopt"; }

PeakMode parse_peak_mode(const std::string& text) {
  if (text == "e2e") return PeakMode::kE2E;
  if (text == "lopt") return PeakMode::kLoPT;
  throw ConfigError("unknown peak mode '" + text + "'");
}

double compare_peak_models(const MemoryLedger& m, PeakMode mode) {
  if (mode == PeakMode::kE2E) return m.M_state + m.A1 + m.A2 + m.M_misc;
  return m.M_state + std::max(m.A1 + m.Ag, m.A2 + m.A_boundary) + m.M_misc;
}

ComputeLedger model_compute(const ModelConfig& config, std::size_t batch, std::size_t seq) {
  config.validate();
  const double tokens = static_cast<double>(batch * seq);
  const double d = static_cast<double>(config.d_model);
  const double layer = 24.0 * d * d + 4.0 * static_cast<double>(seq) * d;
  const double s = static_cast<double>(config.resolved_split());
  const double n2 = static_cast<double>(config.n_layers) - s;
  ComputeLedger c;
  c.C_F1 = tokens * s * layer;
  c.C_F2 = tokens * (n2 * layer + 2.0 * d * static_cast<double>(config.vocab_size));
  c.C_B1_task = 2.0 * c.C_F1;
  c.C_B2_task = 2.0 * c.C_F2;
  // The aux backward runs through the whole first block, same as the task one.
  c.C_B1_aux = c.C_B1_task;
  // Two d x d/4 matmuls: d^2 forward, 2 d^2 backward per token.
  c.C_g = 3.0 * d * d * tokens;
  return c;
}

double compare_compute(const ComputeLedger& c) { return c.C_B1_aux + c.C_g - c.C_B1_task; }

MeasuredPeak measured_high_water(const std::vector<StepReport>& run) {
  MeasuredPeak out;
  for (const auto& rep : run)
    for (const auto& [phase, bytes] : rep.memory.phase_peak) {
      auto& slot = out.by_phase[phase];
      slot = std::max(slot, bytes);
      out.overall = std::max(out.overall, bytes);
    }
  return out;
}

}  // namespace lopt
