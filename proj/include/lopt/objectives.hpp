#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lopt/model.hpp"

namespace lopt {

/// Closed-form parameter count of the reconstruction head: d^2/2 + 3d + d/4.
std::size_t aux_head_param_count(std::size_t d_model);

/// Bottleneck MLP mapping a boundary state back to the embedding state:
/// W2 * GELU(W1 * LN(h) + b1) + b2 with a d/4 hidden width. Training only.
template <typename Real>
class AuxHead {
 public:
  /// Xavier-uniform weights with gain 0.1, zero biases, unit LN gain.
  static AuxHead init(std::size_t d_model, std::uint64_t seed, std::string prefix = "aux");
  static AuxHead from_params(std::size_t d_model, ParameterMap<Real> params, std::string prefix = "aux");

  std::size_t d_model() const { return d_; }
  const std::string& prefix() const { return prefix_; }
  ParameterMap<Real>& params() { return params_; }
  const ParameterMap<Real>& params() const { return params_; }
  std::vector<Parameter<Real>*> param_list();
  std::vector<const Parameter<Real>*> param_list() const;
  std::size_t param_count() const;

  Var<Real> forward(Tape<Real>& tape, Var<Real> h) const;

 private:
  AuxHead(std::size_t d, std::string prefix, ParameterMap<Real> params);
  Var<Real> p(Tape<Real>& tape, const char* suffix) const;

  std::size_t d_ = 0;
  std::string prefix_;
  ParameterMap<Real> params_;
};

/// Dedicated linear decoder over the boundary state for the local
/// next-token objective: logits = h W^T + b.
template <typename Real>
class LocalDecoder {
 public:
  static LocalDecoder init(std::size_t d_model, std::size_t vocab, std::uint64_t seed, double init_std = 0.02);
  static LocalDecoder from_params(ParameterMap<Real> params);

  ParameterMap<Real>& params() { return params_; }
  const ParameterMap<Real>& params() const { return params_; }
  std::vector<Parameter<Real>*> param_list();

  Var<Real> forward(Tape<Real>& tape, Var<Real> h) const;

 private:
  explicit LocalDecoder(ParameterMap<Real> params) : params_(std::move(params)) {}
  ParameterMap<Real> params_;
};

enum class LocalObjective { kRecon, kNtp, kNtpPlusRecon };

const char* to_string(LocalObjective kind);
LocalObjective parse_local_objective(const std::string& text);

struct LossConfig {
  LocalObjective kind = LocalObjective::kRecon;
  double lambda_aux = 10.0;
  /// Weight on the local next-token loss when kind is kNtpPlusRecon.
  double ntp_weight = 0.01;

  void validate() const;
};

/// Next-token supervision for a TokenBatch: targets[i] is the token predicted
/// at flat position i and mask[i] is 1 where that prediction counts.
template <typename Real>
struct Supervision {
  std::vector<int> targets;
  std::vector<Real> mask;

  std::size_t count() const;
};

/// (1/(|M| d)) sum over masked rows of ||g(h1) - sg(h0)||^2. With M the
/// non-padding rows this is the B*L*d normalization on unpadded batches.
template <typename Real>
Var<Real> aux_recon_loss(Tape<Real>& tape, const AuxHead<Real>& head, Var<Real> h1, Var<Real> h0,
                         std::span<const Real> row_mask = {});

/// Mean negative log-likelihood over masked positions.
template <typename Real>
Var<Real> sft_loss(Var<Real> logits, const Supervision<Real>& sup);

template <typename Real>
Var<Real> local_ntp_loss(Tape<Real>& tape, const LocalDecoder<Real>& decoder, Var<Real> h1,
                         const Supervision<Real>& sup);

/// Components of the first-block objective for one batch.
template <typename Real>
struct LocalLoss {
  Var<Real> total;      // weighted sum that is backpropagated
  double recon = 0.0;   // unweighted reconstruction loss (0 when unused)
  double ntp = 0.0;     // unweighted local next-token loss (0 when unused)
};

/// Builds the weighted first-block objective selected by cfg. decoder may be
/// null when cfg.kind is kRecon; head may be null when cfg.kind is kNtp.
template <typename Real>
LocalLoss<Real> local_objective(Tape<Real>& tape, const LossConfig& cfg, const AuxHead<Real>* head,
                                const LocalDecoder<Real>* decoder, Var<Real> h1, Var<Real> h0,
                                std::span<const Real> row_mask, const Supervision<Real>& sup);

}  // namespace lopt
