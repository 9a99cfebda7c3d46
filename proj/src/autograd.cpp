#include "lopt/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace lopt {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace ag {

const char* op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kVariable: return "variable";
    case Op::kParameter: return "parameter";
    case Op::kAdd: return "add";
    case Op::kMul: return "mul";
    case Op::kMatmul: return "matmul";
    case Op::kEmbedLookup: return "embed_lookup";
    case Op::kLayerNorm: return "layernorm";
    case Op::kGelu: return "gelu";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kMse: return "mse";
    case Op::kGather: return "gather";
    case Op::kConcat: return "concat";
    case Op::kScale: return "scale";
    case Op::kTranspose: return "transpose";
    case Op::kCausalMask: return "causal_mask";
    case Op::kStopGradient: return "stop_gradient";
    case Op::kSlice: return "slice";
    case Op::kRope: return "rope";
    case Op::kSum: return "sum";
    case Op::kWeightedSum: return "weighted_sum";
    case Op::kClippedSurrogate: return "clipped_surrogate";
  }
  return "?";
}

namespace {

template <typename Real>
void accumulate_into(Tensor<Real>& dst, Tensor<Real>&& src) {
  if (dst.empty() && dst.shape().empty() && src.size() != 0) {
    dst = std::move(src);
    return;
  }
  if (dst.size() != src.size()) throw ShapeError("gradient accumulation size mismatch");
  Real* d = dst.data();
  const Real* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

// An empty default-constructed Tensor has shape {} and size 0; a real scalar
// has shape {} and size 1. "Absent" means size 0.
template <typename Real>
bool absent(const Tensor<Real>& t) {
  return t.size() == 0;
}

template <typename Real>
void add_grad(std::vector<Tensor<Real>>& grads, int id, Tensor<Real>&& g) {
  if (absent(grads[id])) {
    grads[id] = std::move(g);
  } else {
    accumulate_into(grads[id], std::move(g));
  }
}

bool is_row_broadcast(const Shape& a, const Shape& b) {
  return b.size() == 1 && !a.empty() && b[0] == a.back() && a != b;
}

template <typename Real>
Tape<Real>& same_tape(Var<Real> a, Var<Real> b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ContractError("vars belong to different tapes");
  return *a.tape;
}

template <typename Real>
Real gelu_cdf(Real x) {
  return Real(0.5) * (Real(1) + std::erf(x * Real(std::numbers::sqrt2 / 2)));
}

template <typename Real>
Real gelu_pdf(Real x) {
  return std::exp(Real(-0.5) * x * x) * Real(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
}

// cos/sin pairs laid out as [L, D/2, 2].
template <typename Real>
std::vector<Real> rope_table(std::size_t L, std::size_t D, double base) {
  std::vector<Real> table(L * D);
  for (std::size_t pos = 0; pos < L; ++pos)
    for (std::size_t p = 0; p < D / 2; ++p) {
      const double theta = static_cast<double>(pos) * std::pow(base, -2.0 * static_cast<double>(p) / D);
      table[(pos * (D / 2) + p) * 2] = static_cast<Real>(std::cos(theta));
      table[(pos * (D / 2) + p) * 2 + 1] = static_cast<Real>(std::sin(theta));
    }
  return table;
}

struct MatmulDims {
  std::size_t batch, m, k, n;
  bool broadcast_b;
};

MatmulDims matmul_dims(const Shape& a, const Shape& b, bool trans_b) {
  if (a.size() < 2 || b.size() < 2)
    throw ShapeError("matmul needs rank >= 2, got " + shape_string(a) + " x " + shape_string(b));
  const std::size_t m = a[a.size() - 2], k = a.back();
  const std::size_t bk = trans_b ? b.back() : b[b.size() - 2];
  const std::size_t n = trans_b ? b[b.size() - 2] : b.back();
  if (bk != k) throw ShapeError("matmul inner dims differ: " + shape_string(a) + " x " + shape_string(b));
  const bool broadcast = b.size() == 2;
  if (!broadcast) {
    if (b.size() != a.size() || !std::equal(a.begin(), a.end() - 2, b.begin()))
      throw ShapeError("matmul batch dims differ: " + shape_string(a) + " x " + shape_string(b));
  }
  return {numel(a) / (m * k), m, k, n, broadcast};
}

}  // namespace

// ---------------------------------------------------------------------------
// GradStore
// ---------------------------------------------------------------------------

template <typename Real>
void GradStore<Real>::accumulate(const Parameter<Real>& p, const Tensor<Real>& g) {
  Tensor<Real> copy = g;
  accumulate(p, std::move(copy));
}

template <typename Real>
void GradStore<Real>::accumulate(const Parameter<Real>& p, Tensor<Real>&& g) {
  auto it = grads_.find(&p);
  if (it == grads_.end()) {
    grads_.emplace(&p, std::move(g));
  } else {
    accumulate_into(it->second, std::move(g));
  }
}

template <typename Real>
void GradStore<Real>::merge(GradStore&& other) {
  for (auto& [p, g] : other.grads_) accumulate(*p, std::move(g));
  other.grads_.clear();
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <typename Real>
Var<Real> Tape<Real>::push(Node n) {
  if (n.op != Op::kParameter && !n.value.all_finite())
    throw NumericsError(std::string("non-finite output from ") + op_name(n.op));
  nodes_.push_back(std::move(n));
  return Var<Real>{this, static_cast<int>(nodes_.size() - 1)};
}

template <typename Real>
typename Tape<Real>::Node& Tape<Real>::node(Var<Real> v) {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw ContractError("var does not belong to this tape");
  return nodes_[v.id];
}

template <typename Real>
const typename Tape<Real>::Node& Tape<Real>::node(Var<Real> v) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
    throw ContractError("var does not belong to this tape");
  return nodes_[v.id];
}

template <typename Real>
const Tensor<Real>& Tape<Real>::value_of(int id) const {
  const Node& n = nodes_[id];
  return n.param ? n.param->value : n.value;
}

template <typename Real>
const Tensor<Real>& Tape<Real>::value(Var<Real> v) const {
  node(v);
  return value_of(v.id);
}

template <typename Real>
Var<Real> Tape<Real>::constant(Tensor<Real> value) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename Real>
Var<Real> Tape<Real>::variable(Tensor<Real> value) {
  Node n;
  n.op = Op::kVariable;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  return push(std::move(n));
}

template <typename Real>
Var<Real> Tape<Real>::param(const Parameter<Real>& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<Real>{this, it->second};
  if (!p.value.all_finite()) throw NumericsError("non-finite parameter " + p.name);
  Node n;
  n.op = Op::kParameter;
  n.param = &p;
  n.requires_grad = grad_enabled_;
  Var<Real> v = push(std::move(n));
  param_nodes_.emplace(&p, v.id);
  return v;
}

template <typename Real>
const Tensor<Real>* Tape<Real>::grad(Var<Real> v) const {
  node(v);
  auto it = leaf_grads_.find(v.id);
  return it == leaf_grads_.end() ? nullptr : &it->second;
}

template <typename Real>
std::size_t Tape<Real>::activation_bytes() const {
  std::size_t total = 0;
  for (const Node& n : nodes_) total += n.value.bytes() + n.saved.bytes();
  return total;
}

template <typename Real>
GradStore<Real> Tape<Real>::backward(Var<Real> loss, bool retain_graph) {
  const Node& root = node(loss);
  if (root.value.size() != 1 || !root.value.shape().empty())
    throw ContractError("backward() needs a scalar loss, got shape " + shape_string(root.value.shape()));
  GradStore<Real> store;
  leaf_grads_.clear();
  if (!root.requires_grad) return store;

  std::vector<Tensor<Real>> grads(nodes_.size());
  grads[loss.id] = Tensor<Real>::scalar(Real(1));
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!absent(grads[id]) && n.requires_grad) propagate(id, grads, store);
    grads[id] = Tensor<Real>();
    if (!retain_graph && id != loss.id && n.op != Op::kVariable && n.op != Op::kParameter) {
      n.value = Tensor<Real>();
      n.saved = Tensor<Real>();
    }
  }
  return store;
}

// ---------------------------------------------------------------------------
// Vector-Jacobian products
// ---------------------------------------------------------------------------

template <typename Real>
void Tape<Real>::propagate(int id, std::vector<Tensor<Real>>& grads, GradStore<Real>& store) {
  Node& n = nodes_[id];
  Tensor<Real> g = std::move(grads[id]);
  auto wants = [&](std::size_t slot) { return nodes_[n.inputs[slot]].requires_grad; };
  auto in = [&](std::size_t slot) -> const Tensor<Real>& { return value_of(n.inputs[slot]); };

  switch (n.op) {
    case Op::kConstant:
    case Op::kStopGradient:
      break;
    case Op::kVariable:
      leaf_grads_[id] = std::move(g);
      break;
    case Op::kParameter:
      store.accumulate(*n.param, std::move(g));
      break;

    case Op::kAdd:
    case Op::kMul: {
      const Tensor<Real>& a = in(0);
      const Tensor<Real>& b = in(1);
      const bool bcast = a.shape() != b.shape();
      const std::size_t cols = a.cols();
      if (wants(0)) {
        Tensor<Real> ga(a.shape());
        for (std::size_t i = 0; i < ga.size(); ++i)
          ga[i] = n.op == Op::kAdd ? g[i] : g[i] * (bcast ? b[i % cols] : b[i]);
        add_grad(grads, n.inputs[0], std::move(ga));
      }
      if (wants(1)) {
        Tensor<Real> gb(b.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
          const Real v = n.op == Op::kAdd ? g[i] : g[i] * a[i];
          gb[bcast ? i % cols : i] += v;
        }
        add_grad(grads, n.inputs[1], std::move(gb));
      }
      break;
    }

    case Op::kMatmul: {
      const Tensor<Real>& a = in(0);
      const Tensor<Real>& b = in(1);
      const bool trans_b = n.attr1 != 0;
      const MatmulDims d = matmul_dims(a.shape(), b.shape(), trans_b);
      const std::size_t M = d.m, K = d.k, N = d.n;
      if (wants(0)) {
        Tensor<Real> ga(a.shape());
        for (std::size_t bi = 0; bi < d.batch; ++bi) {
          const Real* G = g.data() + bi * M * N;
          const Real* B = b.data() + (d.broadcast_b ? 0 : bi * K * N);
          Real* GA = ga.data() + bi * M * K;
          for (std::size_t i = 0; i < M; ++i) {
            Real* row = GA + i * K;
            if (!trans_b) {
              for (std::size_t k = 0; k < K; ++k) {
                const Real* brow = B + k * N;
                const Real* grow = G + i * N;
                Real acc = 0;
                for (std::size_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
                row[k] = acc;
              }
            } else {
              for (std::size_t j = 0; j < N; ++j) {
                const Real c = G[i * N + j];
                const Real* brow = B + j * K;
                for (std::size_t k = 0; k < K; ++k) row[k] += c * brow[k];
              }
            }
          }
        }
        add_grad(grads, n.inputs[0], std::move(ga));
      }
      if (wants(1)) {
        Tensor<Real> gb(b.shape());
        for (std::size_t bi = 0; bi < d.batch; ++bi) {
          const Real* G = g.data() + bi * M * N;
          const Real* A = a.data() + bi * M * K;
          Real* GB = gb.data() + (d.broadcast_b ? 0 : bi * K * N);
          for (std::size_t i = 0; i < M; ++i) {
            if (!trans_b) {
              const Real* grow = G + i * N;
              for (std::size_t k = 0; k < K; ++k) {
                const Real av = A[i * K + k];
                Real* dst = GB + k * N;
                for (std::size_t j = 0; j < N; ++j) dst[j] += av * grow[j];
              }
            } else {
              const Real* arow = A + i * K;
              for (std::size_t j = 0; j < N; ++j) {
                const Real c = G[i * N + j];
                Real* dst = GB + j * K;
                for (std::size_t k = 0; k < K; ++k) dst[k] += c * arow[k];
              }
            }
          }
        }
        add_grad(grads, n.inputs[1], std::move(gb));
      }
      break;
    }

    case Op::kEmbedLookup: {
      if (!wants(0)) break;
      const Tensor<Real>& table = in(0);
      const std::size_t D = table.cols();
      Tensor<Real> gt(table.shape());
      for (std::size_t r = 0; r < n.indices.size(); ++r) {
        Real* dst = gt.data() + static_cast<std::size_t>(n.indices[r]) * D;
        const Real* src = g.data() + r * D;
        for (std::size_t c = 0; c < D; ++c) dst[c] += src[c];
      }
      add_grad(grads, n.inputs[0], std::move(gt));
      break;
    }

    case Op::kLayerNorm: {
      const Tensor<Real>& x = in(0);
      const Tensor<Real>& gain = in(1);
      const std::size_t D = x.cols(), R = x.rows();
      const Real* stats = n.saved.data();
      Tensor<Real> gx(wants(0) ? x.shape() : Shape{0});
      Tensor<Real> gg(wants(1) ? gain.shape() : Shape{0});
      Tensor<Real> gbias(wants(2) ? gain.shape() : Shape{0});
      std::vector<Real> xhat(D);
      for (std::size_t r = 0; r < R; ++r) {
        const Real mean = stats[2 * r], rstd = stats[2 * r + 1];
        const Real* xr = x.data() + r * D;
        const Real* gr = g.data() + r * D;
        Real m1 = 0, m2 = 0;
        for (std::size_t c = 0; c < D; ++c) {
          xhat[c] = (xr[c] - mean) * rstd;
          const Real gh = gr[c] * gain[c];
          m1 += gh;
          m2 += gh * xhat[c];
        }
        m1 /= Real(D);
        m2 /= Real(D);
        if (wants(0)) {
          Real* out = gx.data() + r * D;
          for (std::size_t c = 0; c < D; ++c) out[c] = rstd * (gr[c] * gain[c] - m1 - xhat[c] * m2);
        }
        if (wants(1))
          for (std::size_t c = 0; c < D; ++c) gg[c] += gr[c] * xhat[c];
        if (wants(2))
          for (std::size_t c = 0; c < D; ++c) gbias[c] += gr[c];
      }
      if (wants(0)) add_grad(grads, n.inputs[0], std::move(gx));
      if (wants(1)) add_grad(grads, n.inputs[1], std::move(gg));
      if (wants(2)) add_grad(grads, n.inputs[2], std::move(gbias));
      break;
    }

    case Op::kGelu: {
      const Tensor<Real>& x = in(0);
      Tensor<Real> gx(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] = g[i] * (gelu_cdf(x[i]) + x[i] * gelu_pdf(x[i]));
      add_grad(grads, n.inputs[0], std::move(gx));
      break;
    }

    case Op::kSoftmax: {
      const Tensor<Real>& y = n.value;
      const std::size_t C = y.cols(), R = y.rows();
      Tensor<Real> gx(y.shape());
      for (std::size_t r = 0; r < R; ++r) {
        const Real* yr = y.data() + r * C;
        const Real* gr = g.data() + r * C;
        Real dot = 0;
        for (std::size_t c = 0; c < C; ++c) dot += gr[c] * yr[c];
        Real* out = gx.data() + r * C;
        for (std::size_t c = 0; c < C; ++c) out[c] = yr[c] * (gr[c] - dot);
      }
      add_grad(grads, n.inputs[0], std::move(gx));
      break;
    }

    case Op::kLogSoftmax: {
      const Tensor<Real>& y = n.value;
      const std::size_t C = y.cols(), R = y.rows();
      Tensor<Real> gx(y.shape());
      for (std::size_t r = 0; r < R; ++r) {
        const Real* yr = y.data() + r * C;
        const Real* gr = g.data() + r * C;
        Real total = 0;
        for (std::size_t c = 0; c < C; ++c) total += gr[c];
        Real* out = gx.data() + r * C;
        for (std::size_t c = 0; c < C; ++c) out[c] = gr[c] - std::exp(yr[c]) * total;
      }
      add_grad(grads, n.inputs[0], std::move(gx));
      break;
    }

    case Op::kMse: {
      const Tensor<Real>& a = in(0);
      const Tensor<Real>& b = in(1);
      const std::size_t C = a.cols(), R = a.rows();
      const Real coef = Real(2) * g.item() / Real(n.attr0);
      Tensor<Real> ga(wants(0) ? a.shape() : Shape{0});
      Tensor<Real> gb(wants(1) ? b.shape() : Shape{0});
      for (std::size_t r = 0; r < R; ++r) {
        if (!n.weights.empty() && n.weights[r] == Real(0)) continue;
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t i = r * C + c;
          const Real v = coef * (a[i] - b[i]);
          if (wants(0)) ga[i] = v;
          if (wants(1)) gb[i] = -v;
        }
      }
      if (wants(0)) add_grad(grads, n.inputs[0], std::move(ga));
      if (wants(1)) add_grad(grads, n.inputs[1], std::move(gb));
      break;
    }

    case Op::kGather: {
      const Tensor<Real>& x = in(0);
      const std::size_t C = x.cols();
      Tensor<Real> gx(x.shape());
      for (std::size_t r = 0; r < n.indices.size(); ++r) gx[r * C + static_cast<std::size_t>(n.indices[r])] = g[r];
      add_grad(grads, n.inputs[0], std::move(gx));
      break;
    }

    case Op::kConcat: {
      const std::size_t R = n.value.rows(), total = n.value.cols();
      std::size_t offset = 0;
      for (std::size_t p = 0; p < n.inputs.size(); ++p) {
        const Tensor<Real>& part = in(p);
        const std::size_t C = part.cols();
        if (wants(p)) {
          Tensor<Real> gp(part.shape());
          for (std::size_t r = 0; r < R; ++r)
            std::copy_n(g.data() + r * total + offset, C, gp.data() + r * C);
          add_grad(grads, n.inputs[p], std::move(gp));
        }
        offset += C;
      }
      break;
    }

    case Op::kScale: {
      const Real c = Real(n.attr0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= c;
      add_grad(grads, n.inputs[0], std::move(g));
      break;
    }

    case Op::kTranspose: {
      const Tensor<Real>& x = in(0);
      const std::size_t R = x.shape()[x.rank() - 2], C = x.cols(), batch = x.size() / (R * C);
      Tensor<Real> gx(x.shape());
      for (std::size_t bi = 0; bi < batch; ++bi)
        for (std::size_t i = 0; i < R; ++i)
          for (std::size_t j = 0; j < C; ++j) gx[bi * R * C + i * C + j] = g[bi * R * C + j * R + i];
      add_grad(grads, n.inputs[0], std::move(gx));
      break;
    }

    case Op::kCausalMask: {
      const std::size_t L = n.value.cols(), batch = n.value.size() / (L * L);
      for (std::size_t bi = 0; bi < batch; ++bi)
        for (std::size_t i = 0; i < L; ++i)
          for (std::size_t j = i + 1; j < L; ++j) g[bi * L * L + i * L + j] = Real(0);
      add_grad(grads, n.inputs[0], std::move(g));
      break;
    }

    case Op::kSlice: {
      const Tensor<Real>& x = in(0);
      const std::size_t C = x.cols(), R = x.rows(), start = n.attr1, len = n.attr2;
      Tensor<Real> gx(x.shape());
      for (std::size_t r = 0; r < R; ++r) std::copy_n(g.data() + r * len, len, gx.data() + r * C + start);
      add_grad(grads, n.inputs[0], std::move(gx));
      break;
    }

    case Op::kRope: {
      const std::size_t D = g.cols(), L = g.shape()[g.rank() - 2], R = g.rows();
      const std::vector<Real> table = rope_table<Real>(L, D, n.attr0);
      for (std::size_t r = 0; r < R; ++r) {
        const std::size_t pos = r % L;
        Real* gr = g.data() + r * D;
        for (std::size_t p = 0; p < D / 2; ++p) {
          const Real c = table[(pos * (D / 2) + p) * 2], s = table[(pos * (D / 2) + p) * 2 + 1];
          const Real g0 = gr[2 * p], g1 = gr[2 * p + 1];
          gr[2 * p] = g0 * c + g1 * s;
          gr[2 * p + 1] = -g0 * s + g1 * c;
        }
      }
      add_grad(grads, n.inputs[0], std::move(g));
      break;
    }

    case Op::kSum: {
      Tensor<Real> gx(in(0).shape(), g.item());
      add_grad(grads, n.inputs[0], std::move(gx));
      break;
    }

    case Op::kWeightedSum: {
      const Real s = g.item();
      Tensor<Real> gx(in(0).shape());
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = s * n.weights[i];
      add_grad(grads, n.inputs[0], std::move(gx));
      break;
    }

    case Op::kClippedSurrogate: {
      const Tensor<Real>& lp = in(0);
      const Real s = g.item();
      const Real lo = Real(1 - n.attr0), hi = Real(1 + n.attr0);
      Tensor<Real> gx(lp.shape());
      for (std::size_t t = 0; t < lp.size(); ++t) {
        if (n.weights[t] == Real(0)) continue;
        const Real adv = n.aux1[t];
        const Real r = std::exp(lp[t] - n.aux0[t]);
        const Real unclipped = r * adv;
        const Real clipped = std::clamp(r, lo, hi) * adv;
        if (unclipped <= clipped) gx[t] = -s * n.weights[t] * unclipped;
      }
      add_grad(grads, n.inputs[0], std::move(gx));
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Forward primitives
// ---------------------------------------------------------------------------

namespace {

template <typename Real>
typename Tape<Real>::Node make_node(Tape<Real>& t, Op op, std::initializer_list<Var<Real>> inputs) {
  typename Tape<Real>::Node n;
  n.op = op;
  for (Var<Real> v : inputs) {
    if (v.tape != &t) throw ContractError(std::string("input to ") + op_name(op) + " from another tape");
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || t.requires_grad(v);
  }
  return n;
}

}  // namespace

template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  Tape<Real>& t = same_tape(a, b);
  const Tensor<Real>& x = a.value();
  const Tensor<Real>& y = b.value();
  const bool bcast = is_row_broadcast(x.shape(), y.shape());
  if (!bcast && x.shape() != y.shape())
    throw ShapeError("add " + shape_string(x.shape()) + " + " + shape_string(y.shape()));
  auto n = make_node(t, Op::kAdd, {a, b});
  n.value = x;
  const std::size_t cols = x.cols();
  Real* out = n.value.data();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] += bcast ? y[i % cols] : y[i];
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
  Tape<Real>& t = same_tape(a, b);
  const Tensor<Real>& x = a.value();
  const Tensor<Real>& y = b.value();
  const bool bcast = is_row_broadcast(x.shape(), y.shape());
  if (!bcast && x.shape() != y.shape())
    throw ShapeError("mul " + shape_string(x.shape()) + " * " + shape_string(y.shape()));
  auto n = make_node(t, Op::kMul, {a, b});
  n.value = x;
  const std::size_t cols = x.cols();
  Real* out = n.value.data();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] *= bcast ? y[i % cols] : y[i];
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b, bool trans_b) {
  Tape<Real>& t = same_tape(a, b);
  const Tensor<Real>& x = a.value();
  const Tensor<Real>& w = b.value();
  const MatmulDims d = matmul_dims(x.shape(), w.shape(), trans_b);
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(d.n);
  auto n = make_node(t, Op::kMatmul, {a, b});
  n.attr1 = trans_b ? 1 : 0;
  n.value = Tensor<Real>(out_shape);
  const std::size_t M = d.m, K = d.k, N = d.n;
  for (std::size_t bi = 0; bi < d.batch; ++bi) {
    const Real* A = x.data() + bi * M * K;
    const Real* B = w.data() + (d.broadcast_b ? 0 : bi * K * N);
    Real* C = n.value.data() + bi * M * N;
    for (std::size_t i = 0; i < M; ++i) {
      Real* crow = C + i * N;
      const Real* arow = A + i * K;
      if (!trans_b) {
        for (std::size_t k = 0; k < K; ++k) {
          const Real av = arow[k];
          const Real* brow = B + k * N;
          for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
      } else {
        for (std::size_t j = 0; j < N; ++j) {
          const Real* brow = B + j * K;
          Real acc = 0;
          for (std::size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
          crow[j] = acc;
        }
      }
    }
  }
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> embed_lookup(Var<Real> table, std::span<const int> ids, const Shape& prefix) {
  Tape<Real>& t = *table.tape;
  const Tensor<Real>& tab = table.value();
  if (tab.rank() != 2) throw ShapeError("embedding table must be rank 2, got " + shape_string(tab.shape()));
  if (numel(prefix) != ids.size()) throw ShapeError("embed_lookup prefix does not match id count");
  const std::size_t V = tab.dim(0), D = tab.dim(1);
  Shape out_shape = prefix;
  out_shape.push_back(D);
  auto n = make_node(t, Op::kEmbedLookup, {table});
  n.value = Tensor<Real>(out_shape);
  n.indices.assign(ids.begin(), ids.end());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= V)
      throw InputError("token id " + std::to_string(ids[r]) + " outside vocabulary of " + std::to_string(V));
    std::copy_n(tab.data() + static_cast<std::size_t>(ids[r]) * D, D, n.value.data() + r * D);
  }
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> layernorm(Var<Real> x, Var<Real> gain, Var<Real> bias, double eps) {
  Tape<Real>& t = same_tape(x, gain);
  same_tape(x, bias);
  const Tensor<Real>& in = x.value();
  const Tensor<Real>& g = gain.value();
  const Tensor<Real>& b = bias.value();
  const std::size_t D = in.cols(), R = in.rows();
  if (g.shape() != Shape{D} || b.shape() != Shape{D})
    throw ShapeError("layernorm gain/bias must be [" + std::to_string(D) + "]");
  auto n = make_node(t, Op::kLayerNorm, {x, gain, bias});
  n.value = Tensor<Real>(in.shape());
  if (n.requires_grad) n.saved = Tensor<Real>(Shape{R, 2});
  for (std::size_t r = 0; r < R; ++r) {
    const Real* xr = in.data() + r * D;
    Real mean = 0;
    for (std::size_t c = 0; c < D; ++c) mean += xr[c];
    mean /= Real(D);
    Real var = 0;
    for (std::size_t c = 0; c < D; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= Real(D);
    const Real rstd = Real(1) / std::sqrt(var + Real(eps));
    Real* out = n.value.data() + r * D;
    for (std::size_t c = 0; c < D; ++c) out[c] = (xr[c] - mean) * rstd * g[c] + b[c];
    if (n.requires_grad) {
      n.saved[2 * r] = mean;
      n.saved[2 * r + 1] = rstd;
    }
  }
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> gelu(Var<Real> x) {
  Tape<Real>& t = *x.tape;
  auto n = make_node(t, Op::kGelu, {x});
  n.value = x.value();
  for (Real& v : n.value.values()) v = v * gelu_cdf(v);
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> softmax(Var<Real> x) {
  Tape<Real>& t = *x.tape;
  auto n = make_node(t, Op::kSoftmax, {x});
  n.value = x.value();
  const std::size_t C = n.value.cols(), R = n.value.rows();
  for (std::size_t r = 0; r < R; ++r) {
    Real* row = n.value.data() + r * C;
    const Real mx = *std::max_element(row, row + C);
    Real total = 0;
    for (std::size_t c = 0; c < C; ++c) total += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < C; ++c) row[c] /= total;
  }
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> log_softmax(Var<Real> x) {
  Tape<Real>& t = *x.tape;
  auto n = make_node(t, Op::kLogSoftmax, {x});
  n.value = x.value();
  const std::size_t C = n.value.cols(), R = n.value.rows();
  for (std::size_t r = 0; r < R; ++r) {
    Real* row = n.value.data() + r * C;
    const Real mx = *std::max_element(row, row + C);
    Real total = 0;
    for (std::size_t c = 0; c < C; ++c) total += std::exp(row[c] - mx);
    const Real lse = mx + std::log(total);
    for (std::size_t c = 0; c < C; ++c) row[c] -= lse;
  }
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> mse(Var<Real> a, Var<Real> b, std::span<const Real> row_mask) {
  Tape<Real>& t = same_tape(a, b);
  const Tensor<Real>& x = a.value();
  const Tensor<Real>& y = b.value();
  if (x.shape() != y.shape()) throw ShapeError("mse " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
  const std::size_t C = x.cols(), R = x.rows();
  if (!row_mask.empty() && row_mask.size() != R) throw ShapeError("mse row mask length differs from row count");
  auto n = make_node(t, Op::kMse, {a, b});
  n.weights.assign(row_mask.begin(), row_mask.end());
  long double acc = 0;
  std::size_t selected = 0;
  for (std::size_t r = 0; r < R; ++r) {
    if (!row_mask.empty() && row_mask[r] == Real(0)) continue;
    ++selected;
    for (std::size_t c = 0; c < C; ++c) {
      const Real d = x[r * C + c] - y[r * C + c];
      acc += static_cast<long double>(d) * d;
    }
  }
  if (selected == 0) throw ContractError("mse over an empty row selection");
  n.attr0 = static_cast<double>(selected * C);
  n.value = Tensor<Real>::scalar(static_cast<Real>(acc / static_cast<long double>(selected * C)));
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> gather(Var<Real> x, std::span<const int> index) {
  Tape<Real>& t = *x.tape;
  const Tensor<Real>& in = x.value();
  const std::size_t C = in.cols(), R = in.rows();
  if (index.size() != R) throw ShapeError("gather needs one index per row");
  Shape out_shape(in.shape().begin(), in.shape().end() - 1);
  auto n = make_node(t, Op::kGather, {x});
  n.value = Tensor<Real>(out_shape);
  n.indices.assign(index.begin(), index.end());
  for (std::size_t r = 0; r < R; ++r) {
    if (index[r] < 0 || static_cast<std::size_t>(index[r]) >= C)
      throw ShapeError("gather index " + std::to_string(index[r]) + " out of range " + std::to_string(C));
    n.value[r] = in[r * C + static_cast<std::size_t>(index[r])];
  }
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> concat(std::span<const Var<Real>> parts) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Tape<Real>& t = *parts[0].tape;
  const Shape& first = parts[0].shape();
  const std::size_t R = parts[0].value().rows();
  std::size_t total = 0;
  typename Tape<Real>::Node n;
  n.op = Op::kConcat;
  for (Var<Real> p : parts) {
    const Shape& s = p.shape();
    if (p.tape != &t || s.size() != first.size() || !std::equal(s.begin(), s.end() - 1, first.begin()))
      throw ShapeError("concat parts disagree on leading dims");
    total += s.back();
    n.inputs.push_back(p.id);
    n.requires_grad = n.requires_grad || p.requires_grad();
  }
  Shape out_shape = first;
  out_shape.back() = total;
  n.value = Tensor<Real>(out_shape);
  std::size_t offset = 0;
  for (Var<Real> p : parts) {
    const Tensor<Real>& v = p.value();
    const std::size_t C = v.cols();
    for (std::size_t r = 0; r < R; ++r) std::copy_n(v.data() + r * C, C, n.value.data() + r * total + offset);
    offset += C;
  }
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> scale(Var<Real> x, double c) {
  Tape<Real>& t = *x.tape;
  auto n = make_node(t, Op::kScale, {x});
  n.attr0 = c;
  n.value = x.value();
  for (Real& v : n.value.values()) v *= Real(c);
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> transpose(Var<Real> x) {
  Tape<Real>& t = *x.tape;
  const Tensor<Real>& in = x.value();
  if (in.rank() < 2) throw ShapeError("transpose needs rank >= 2");
  const std::size_t R = in.shape()[in.rank() - 2], C = in.cols(), batch = in.size() / (R * C);
  Shape out_shape = in.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  auto n = make_node(t, Op::kTranspose, {x});
  n.value = Tensor<Real>(out_shape);
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < C; ++j) n.value[bi * R * C + j * R + i] = in[bi * R * C + i * C + j];
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> causal_mask(Var<Real> scores) {
  Tape<Real>& t = *scores.tape;
  const Tensor<Real>& in = scores.value();
  if (in.rank() < 2 || in.cols() != in.shape()[in.rank() - 2])
    throw ShapeError("causal_mask needs square trailing dims, got " + shape_string(in.shape()));
  const std::size_t L = in.cols(), batch = in.size() / (L * L);
  auto n = make_node(t, Op::kCausalMask, {scores});
  n.value = in;
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = i + 1; j < L; ++j) n.value[bi * L * L + i * L + j] = kMaskValue<Real>;
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> stop_gradient(Var<Real> x) {
  Tape<Real>& t = *x.tape;
  typename Tape<Real>::Node n;
  n.op = Op::kStopGradient;
  n.inputs.push_back(x.id);
  n.requires_grad = false;
  n.value = x.value();
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> slice(Var<Real> x, std::size_t start, std::size_t len) {
  Tape<Real>& t = *x.tape;
  const Tensor<Real>& in = x.value();
  const std::size_t C = in.cols(), R = in.rows();
  if (in.rank() == 0 || start + len > C || len == 0)
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(len) + ") of " +
                     shape_string(in.shape()));
  Shape out_shape = in.shape();
  out_shape.back() = len;
  auto n = make_node(t, Op::kSlice, {x});
  n.attr1 = start;
  n.attr2 = len;
  n.value = Tensor<Real>(out_shape);
  for (std::size_t r = 0; r < R; ++r) std::copy_n(in.data() + r * C + start, len, n.value.data() + r * len);
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> rope(Var<Real> x, double base) {
  Tape<Real>& t = *x.tape;
  const Tensor<Real>& in = x.value();
  if (in.rank() < 2 || in.cols() % 2 != 0) throw ShapeError("rope needs [..., L, D] with even D");
  const std::size_t D = in.cols(), L = in.shape()[in.rank() - 2], R = in.rows();
  auto n = make_node(t, Op::kRope, {x});
  n.attr0 = base;
  const std::vector<Real> table = rope_table<Real>(L, D, base);
  n.value = in;
  for (std::size_t r = 0; r < R; ++r) {
    const std::size_t pos = r % L;
    Real* row = n.value.data() + r * D;
    for (std::size_t p = 0; p < D / 2; ++p) {
      const Real c = table[(pos * (D / 2) + p) * 2], s = table[(pos * (D / 2) + p) * 2 + 1];
      const Real x0 = row[2 * p], x1 = row[2 * p + 1];
      row[2 * p] = x0 * c - x1 * s;
      row[2 * p + 1] = x0 * s + x1 * c;
    }
  }
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> sum(Var<Real> x) {
  Tape<Real>& t = *x.tape;
  auto n = make_node(t, Op::kSum, {x});
  long double acc = 0;
  for (Real v : x.value().values()) acc += v;
  n.value = Tensor<Real>::scalar(static_cast<Real>(acc));
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> weighted_sum(Var<Real> x, std::span<const Real> weights) {
  Tape<Real>& t = *x.tape;
  const Tensor<Real>& in = x.value();
  if (weights.size() != in.size()) throw ShapeError("weighted_sum weight count differs from element count");
  auto n = make_node(t, Op::kWeightedSum, {x});
  n.weights.assign(weights.begin(), weights.end());
  long double acc = 0;
  for (std::size_t i = 0; i < in.size(); ++i) acc += static_cast<long double>(weights[i]) * in[i];
  n.value = Tensor<Real>::scalar(static_cast<Real>(acc));
  return t.push(std::move(n));
}

template <typename Real>
Var<Real> clipped_surrogate(Var<Real> logp, std::span<const Real> old_logp, std::span<const Real> advantages,
                            std::span<const Real> weights, double eps) {
  Tape<Real>& t = *logp.tape;
  const Tensor<Real>& lp = logp.value();
  if (old_logp.size() != lp.size() || advantages.size() != lp.size() || weights.size() != lp.size())
    throw ContractError("clipped_surrogate inputs are not token-aligned");
  if (!(eps > 0.0 && eps < 1.0)) throw ContractError("clip epsilon must lie in (0, 1)");
  auto n = make_node(t, Op::kClippedSurrogate, {logp});
  n.attr0 = eps;
  n.aux0.assign(old_logp.begin(), old_logp.end());
  n.aux1.assign(advantages.begin(), advantages.end());
  n.weights.assign(weights.begin(), weights.end());
  const Real lo = Real(1 - eps), hi = Real(1 + eps);
  long double acc = 0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (weights[i] == Real(0)) continue;
    const Real r = std::exp(lp[i] - old_logp[i]);
    const Real obj = std::min(r * advantages[i], std::clamp(r, lo, hi) * advantages[i]);
    acc -= static_cast<long double>(weights[i]) * obj;
  }
  n.value = Tensor<Real>::scalar(static_cast<Real>(acc));
  return t.push(std::move(n));
}

template <typename Real>
double finite_difference_check(const ScalarBuilder<Real>& f, const Tensor<Real>& point, double eps) {
  Tensor<Real> analytic;
  {
    Tape<Real> tape;
    Var<Real> x = tape.variable(point);
    Var<Real> y = f(tape, x);
    tape.backward(y, true);
    const Tensor<Real>* g = tape.grad(x);
    analytic = g ? *g : Tensor<Real>(point.shape());
  }
  auto eval = [&](const Tensor<Real>& p) {
    Tape<Real> tape(false);
    Var<Real> x = tape.constant(p);
    const Real v = f(tape, x).value().item();
    if (!std::isfinite(v)) throw NumericsError("non-finite value during finite differencing");
    return static_cast<double>(v);
  };
  std::vector<double> central(point.size());
  Tensor<Real> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const Real orig = probe[i];
    probe[i] = orig + Real(eps);
    const double up = eval(probe);
    probe[i] = orig - Real(eps);
    const double down = eval(probe);
    probe[i] = orig;
    central[i] = (up - down) / (2.0 * eps);
  }
  // Near a stationary coordinate the difference quotient's truncation error
  // dwarfs the true derivative, so the denominator never drops below a
  // small fraction of the largest entry.
  double scale = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i)
    scale = std::max(scale, std::abs(static_cast<double>(analytic[i])) + std::abs(central[i]));
  const double floor = kFdRelativeFloor * scale + 1e-12;
  double worst = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double a = static_cast<double>(analytic[i]);
    worst = std::max(worst, std::abs(a - central[i]) / std::max(std::abs(a) + std::abs(central[i]), floor));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define LOPT_INSTANTIATE(Real)                                                                               \
  template class GradStore<Real>;                                                                            \
  template class Tape<Real>;                                                                                 \
  template Var<Real> add(Var<Real>, Var<Real>);                                                              \
  template Var<Real> mul(Var<Real>, Var<Real>);                                                              \
  template Var<Real> matmul(Var<Real>, Var<Real>, bool);                                                     \
  template Var<Real> embed_lookup(Var<Real>, std::span<const int>, const Shape&);                            \
  template Var<Real> layernorm(Var<Real>, Var<Real>, Var<Real>, double);                                     \
  template Var<Real> gelu(Var<Real>);                                                                        \
  template Var<Real> softmax(Var<Real>);                                                                     \
  template Var<Real> log_softmax(Var<Real>);                                                                 \
  template Var<Real> mse(Var<Real>, Var<Real>, std::span<const Real>);                                       \
  template Var<Real> gather(Var<Real>, std::span<const int>);                                                \
  template Var<Real> concat(std::span<const Var<Real>>);                                                     \
  template Var<Real> scale(Var<Real>, double);                                                               \
  template Var<Real> transpose(Var<Real>);                                                                   \
  template Var<Real> causal_mask(Var<Real>);                                                                 \
  template Var<Real> stop_gradient(Var<Real>);                                                               \
  template Var<Real> slice(Var<Real>, std::size_t, std::size_t);                                             \
  template Var<Real> rope(Var<Real>, double);                                                                \
  template Var<Real> sum(Var<Real>);                                                                         \
  template Var<Real> weighted_sum(Var<Real>, std::span<const Real>);                                         \
  template Var<Real> clipped_surrogate(Var<Real>, std::span<const Real>, std::span<const Real>,              \
                                       std::span<const Real>, double);                                       \
  template double finite_difference_check(const ScalarBuilder<Real>&, const Tensor<Real>&, double);

LOPT_INSTANTIATE(float)
LOPT_INSTANTIATE(double)

#undef LOPT_INSTANTIATE

}  // namespace ag
}  // namespace lopt
