#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lopt/model.hpp"
#include "lopt/objectives.hpp"
#include "lopt/trainer.hpp"

namespace lopt {

/// Relative drift of one layer. Undefined (nullopt) when the base norm is 0.
struct LayerDrift {
  std::string layer;  // "embed", "0".."N-1", "head"
  std::optional<double> total, attn, mlp;
};

struct DriftReport {
  std::vector<LayerDrift> layers;
  /// Absolute drift ||theta_T - theta_0|| of the first and last blocks.
  double d1 = 0.0;
  double d2 = 0.0;

  /// Mean total drift over transformer layers in [begin, end). Layers with an
  /// undefined drift are skipped; nullopt when none are defined.
  std::optional<double> mean_over(std::size_t begin, std::size_t end) const;
  const LayerDrift& layer(const std::string& name) const;
};

/// ||tuned - base|| / ||base|| per layer, concatenating each layer's
/// parameters, with an attention/MLP split. final_norm joins the head
/// pseudo-layer.
template <typename Real>
DriftReport layer_drift(const ModelConfig& config, const ParameterMap<Real>& base, const ParameterMap<Real>& tuned);

/// Names making up a drift pseudo-layer or transformer layer.
std::vector<std::string> drift_group(const ModelConfig& config, const std::string& layer);

/// Adds seeded Gaussian noise to each of the first s_front layers, rescaled so
/// that each layer's realized relative drift equals target. Later layers,
/// the embedding and the head are copied bit for bit.
template <typename Real>
ParameterMap<Real> perturb_front_layers(const ModelConfig& config, const ParameterMap<Real>& params,
                                        std::size_t s_front, double target, std::uint64_t seed);

struct ResidualStats {
  std::vector<double> norms;  // ||g(h1) - h0|| per non-padding position
  double mean = 0.0;
  double max = 0.0;
};

template <typename Real>
ResidualStats recon_residual_stats(const Transformer<Real>& model, const AuxHead<Real>& head, const TokenBatch& batch,
                                   int pad_id);

/// Matrix-free operator for spectral-norm estimation.
struct LinearOperator {
  std::size_t in_dim = 0;
  std::function<std::vector<double>(const std::vector<double>&)> apply;            // J v
  std::function<std::vector<double>(const std::vector<double>&)> apply_transpose;  // J^T u
};

struct PowerIterationOptions {
  std::size_t iters = 20;
  std::size_t restarts = 3;
  std::uint64_t seed = 0;
};

/// Largest singular value estimate: power iteration on J^T J from several
/// random starts, keeping the best. Zero operator gives 0.
double spectral_norm_estimate(const LinearOperator& op, const PowerIterationOptions& opts = {});

/// Jacobian of a tape-built map at point: forward products by central
/// differences with step fd_eps, transpose products by backward.
template <typename Real>
LinearOperator jacobian_operator(const ag::ScalarBuilder<Real>& map, const Tensor<Real>& point, double fd_eps = 1e-6);

/// Jacobian of the second block (boundary to logits) at a boundary state.
template <typename Real>
LinearOperator k2_boundary_operator(const Transformer<Real>& model, const Tensor<Real>& boundary, double fd_eps = 1e-6);

/// Jacobian of the reconstruction head at a boundary state.
template <typename Real>
LinearOperator aux_boundary_operator(const AuxHead<Real>& head, const Tensor<Real>& boundary, double fd_eps = 1e-6);

/// Jacobian of the boundary state with respect to the first-block parameters.
/// The model is perturbed in place during forward products and restored.
template <typename Real>
LinearOperator k1_param_operator(Transformer<Real>& model, const TokenBatch& batch, double fd_eps = 1e-6);

/// |T(u_next, v) - T(u, v)|: task loss change from swapping in new
/// first-block parameters while the rest of the model stays at model.
template <typename Real>
double interface_drift_gamma(const Transformer<Real>& model, const ParameterMap<Real>& u_next,
                             const std::vector<TaskChunk<Real>>& chunks);

struct TriangleReport {
  std::size_t pairs = 0;
  std::size_t violations = 0;  // pairs with violation above tolerance
  double max_violation = 0.0;  // max(0, lhs - rhs) over pairs
  double min_slack = 0.0;      // min(rhs - lhs) over pairs
};

/// Checks ||h0 - h0'|| <= ||h0 - g(z)|| + ||g(z) - g(z')|| + ||g(z') - h0'||
/// for each pair of equally shaped batches, with vectors flattened.
template <typename Real>
TriangleReport triangle_noncollapse_check(const Transformer<Real>& model, const AuxHead<Real>& head,
                                          const std::vector<std::pair<TokenBatch, TokenBatch>>& pairs,
                                          double tolerance = 1e-9);

}  // namespace lopt
