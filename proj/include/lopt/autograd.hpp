#pragma once

// Reverse-mode automatic differentiation on an append-only tape.
//
// A Tape records one node per primitive application. Nodes are stored in
// creation order, so every node's inputs precede it and backward() is a single
// reverse sweep. Parameters enter the tape as leaves that reference external
// storage; their gradients are returned in a GradStore, in which a parameter
// the loss never reached has no entry at all (absent, as opposed to zero).
//
// stop_gradient() copies its input and produces a node that does not require
// gradients, so nothing upstream of it is visited during backward.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lopt/tensor.hpp"

namespace lopt::ag {

enum class Op : std::uint8_t {
  kConstant,
  kVariable,
  kParameter,
  kAdd,
  kMul,
  kMatmul,
  kEmbedLookup,
  kLayerNorm,
  kGelu,
  kSoftmax,
  kLogSoftmax,
  kMse,
  kGather,
  kConcat,
  kScale,
  kTranspose,
  kCausalMask,
  kStopGradient,
  kSlice,
  kRope,
  kSum,
  kWeightedSum,
  kClippedSurrogate,
};

const char* op_name(Op op);

inline constexpr double kLayerNormEps = 1e-5;

/// A named trainable tensor owned outside any tape.
template <typename Real>
struct Parameter {
  std::string name;
  Tensor<Real> value;
};

template <typename Real>
class Tape;

/// Handle to a node on a tape.
template <typename Real>
struct Var {
  Tape<Real>* tape = nullptr;
  int id = -1;

  const Tensor<Real>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Parameter gradients produced by one backward pass.
template <typename Real>
class GradStore {
 public:
  const Tensor<Real>* find(const Parameter<Real>& p) const {
    auto it = grads_.find(&p);
    return it == grads_.end() ? nullptr : &it->second;
  }
  bool has(const Parameter<Real>& p) const { return grads_.count(&p) != 0; }
  std::size_t size() const { return grads_.size(); }
  bool empty() const { return grads_.empty(); }
  void clear() { grads_.clear(); }

  void accumulate(const Parameter<Real>& p, const Tensor<Real>& g);
  void accumulate(const Parameter<Real>& p, Tensor<Real>&& g);
  /// Adds every entry of other into this store.
  void merge(GradStore&& other);

 private:
  std::unordered_map<const Parameter<Real>*, Tensor<Real>> grads_;
};

template <typename Real>
class Tape {
 public:
  /// With grad disabled every node is created as not requiring gradients and
  /// primitives skip the extra state they would save for backward.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<Real> constant(Tensor<Real> value);
  /// Leaf whose gradient can be read back with grad() after backward.
  Var<Real> variable(Tensor<Real> value);
  /// Leaf referencing p's storage. Repeated calls return the same node.
  Var<Real> param(const Parameter<Real>& p);

  /// Runs the reverse sweep from a scalar loss. Unless retain_graph is set,
  /// node values and saved state are released as the sweep passes them.
  GradStore<Real> backward(Var<Real> loss, bool retain_graph = false);

  /// Gradient of a variable() leaf from the last backward, or nullptr.
  const Tensor<Real>* grad(Var<Real> v) const;

  const Tensor<Real>& value(Var<Real> v) const;
  bool requires_grad(Var<Real> v) const { return node(v).requires_grad; }
  Op op(Var<Real> v) const { return node(v).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Bytes of node values and saved state owned by the tape.
  std::size_t activation_bytes() const;

  // Primitive construction; called from the free functions below.
  struct Node {
    Op op = Op::kConstant;
    std::vector<int> inputs;
    Tensor<Real> value;
    const Parameter<Real>* param = nullptr;
    bool requires_grad = false;
    Tensor<Real> saved;            // op-specific saved state
    std::vector<int> indices;      // token ids / gather targets
    std::vector<Real> weights;     // constant per-element weights
    std::vector<Real> aux0, aux1;  // constant side inputs (old log-probs, advantages)
    double attr0 = 0.0;
    std::size_t attr1 = 0, attr2 = 0;
  };

  Var<Real> push(Node node);
  Node& node(Var<Real> v);
  const Node& node(Var<Real> v) const;
  const Tensor<Real>& value_of(int id) const;

 private:
  void propagate(int id, std::vector<Tensor<Real>>& grads, GradStore<Real>& store);

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<Real>*, int> param_nodes_;
  std::unordered_map<int, Tensor<Real>> leaf_grads_;
};

// ---------------------------------------------------------------------------
// Primitives. Shape rules:
//   add, mul        a and b equal shapes, or b of shape [a.cols()] broadcast over rows
//   matmul          a [..., M, K]; b [K, N] or [..., K, N] with a's leading dims;
//                   trans_b reads b as [..., N, K]
//   embed_lookup    table [V, D], ids of length prod(prefix) -> prefix + [D]
//   layernorm       x [..., D], gain [D], bias [D]; normalizes the last dim
//   softmax, log_softmax   over the last dim
//   mse             equal shapes -> scalar mean over selected rows and all cols
//   gather          x [..., C], one index per row -> x.shape minus last dim
//   concat          equal leading dims, joined on the last dim
//   transpose       swaps the last two dims
//   causal_mask     [..., L, L]; entries above the diagonal become kMaskValue
//   slice           [start, start+len) of the last dim
//   rope            x [..., L, D] with D even; rotary position encoding by row
//   sum, weighted_sum, clipped_surrogate -> scalar
// ---------------------------------------------------------------------------

template <typename Real>
inline constexpr Real kMaskValue = Real(-1e30);

template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b);
template <typename Real>
Var<Real> mul(Var<Real> a, Var<Real> b);
template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b, bool trans_b = false);
template <typename Real>
Var<Real> embed_lookup(Var<Real> table, std::span<const int> ids, const Shape& prefix);
template <typename Real>
Var<Real> layernorm(Var<Real> x, Var<Real> gain, Var<Real> bias, double eps = kLayerNormEps);
template <typename Real>
Var<Real> gelu(Var<Real> x);
template <typename Real>
Var<Real> softmax(Var<Real> x);
template <typename Real>
Var<Real> log_softmax(Var<Real> x);
/// Mean squared difference. row_mask, when non-empty, selects the rows that
/// count (value 1) and the mean is taken over selected rows times cols.
template <typename Real>
Var<Real> mse(Var<Real> a, Var<Real> b, std::span<const Real> row_mask = {});
template <typename Real>
Var<Real> gather(Var<Real> x, std::span<const int> index);
template <typename Real>
Var<Real> concat(std::span<const Var<Real>> parts);
template <typename Real>
Var<Real> scale(Var<Real> x, double c);
template <typename Real>
Var<Real> transpose(Var<Real> x);
template <typename Real>
Var<Real> causal_mask(Var<Real> scores);
template <typename Real>
Var<Real> stop_gradient(Var<Real> x);
template <typename Real>
Var<Real> slice(Var<Real> x, std::size_t start, std::size_t len);
template <typename Real>
Var<Real> rope(Var<Real> x, double base = 10000.0);
template <typename Real>
Var<Real> sum(Var<Real> x);
template <typename Real>
Var<Real> weighted_sum(Var<Real> x, std::span<const Real> weights);
/// -sum_t w_t * min(r_t * A_t, clip(r_t, 1-eps, 1+eps) * A_t) with
/// r_t = exp(logp_t - old_logp_t). Entries with w_t == 0 are skipped.
template <typename Real>
Var<Real> clipped_surrogate(Var<Real> logp, std::span<const Real> old_logp, std::span<const Real> advantages,
                            std::span<const Real> weights, double eps);

// ---------------------------------------------------------------------------
// Finite-difference checking.
// ---------------------------------------------------------------------------

template <typename Real>
using ScalarBuilder = std::function<Var<Real>(Tape<Real>&, Var<Real>)>;

inline constexpr double kFdRelativeFloor = 1e-6;

/// Max over coordinates of |analytic - central| / max(|analytic| + |central|, floor),
/// where the analytic gradient comes from backward(), the central difference
/// perturbs one coordinate of point by +/- eps, and floor is kFdRelativeFloor
/// times the largest |analytic| + |central| of the instance.
template <typename Real>
double finite_difference_check(const ScalarBuilder<Real>& f, const Tensor<Real>& point, double eps);

}  // namespace lopt::ag
