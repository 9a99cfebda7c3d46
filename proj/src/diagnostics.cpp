#include "lopt/diagnostics.hpp"

#include <cmath>
#include <random>
#include <set>

namespace lopt {

std::optional<double> DriftReport::mean_over(std::size_t begin, std::size_t end) const {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t l = begin; l < end; ++l) {
    const auto& d = layer(std::to_string(l)).total;
    if (!d) continue;
    total += *d;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return total / static_cast<double>(n);
}

const LayerDrift& DriftReport::layer(const std::string& name) const {
  for (const auto& l : layers)
    if (l.layer == name) return l;
  throw ContractError("drift report has no layer " + name);
}

std::vector<std::string> drift_group(const ModelConfig& config, const std::string& layer) {
  if (layer == "embed") return {names::kEmbed};
  if (layer == "head") {
    std::vector<std::string> out{names::kFinalNormGain, names::kFinalNormBias};
    if (!config.share_tied_tensor) out.push_back(names::kHead);
    return out;
  }
  return names::layer_params(std::stoul(layer));
}

namespace {

template <typename Real>
struct Sums {
  long double diff = 0, base = 0;
  void add(const Tensor<Real>& a, const Tensor<Real>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      const long double d = static_cast<long double>(b[i]) - static_cast<long double>(a[i]);
      diff += d * d;
      base += static_cast<long double>(a[i]) * a[i];
    }
  }
  std::optional<double> ratio() const {
    if (base == 0) return std::nullopt;
    return static_cast<double>(std::sqrt(diff) / std::sqrt(base));
  }
};

template <typename Real>
Sums<Real> group_sums(const ParameterMap<Real>& base, const ParameterMap<Real>& tuned,
                      const std::vector<std::string>& group) {
  Sums<Real> s;
  for (const auto& name : group) s.add(base.at(name).value, tuned.at(name).value);
  return s;
}

}  // namespace

template <typename Real>
DriftReport layer_drift(const ModelConfig& config, const ParameterMap<Real>& base, const ParameterMap<Real>& tuned) {
  if (base.size() != tuned.size()) throw ConfigError("drift: checkpoints hold different parameter sets");
  for (const auto& [name, p] : base) {
    auto it = tuned.find(name);
    if (it == tuned.end() || it->second.value.shape() != p.value.shape())
      throw ConfigError("drift: checkpoints disagree on parameter " + name);
  }
  const Partition part = make_partition(config);
  for (const auto& block : part.blocks)
    for (const auto& name : block)
      if (!base.count(name)) throw ConfigError("drift: checkpoint lacks " + name + " required by the config");

  DriftReport rep;
  rep.layers.push_back({"embed", group_sums(base, tuned, drift_group(config, "embed")).ratio(), {}, {}});
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerDrift d;
    d.layer = std::to_string(l);
    d.total = group_sums(base, tuned, names::layer_params(l)).ratio();
    d.attn = group_sums(base, tuned, names::layer_attention_params(l)).ratio();
    d.mlp = group_sums(base, tuned, names::layer_mlp_params(l)).ratio();
    rep.layers.push_back(std::move(d));
  }
  rep.layers.push_back({"head", group_sums(base, tuned, drift_group(config, "head")).ratio(), {}, {}});
  rep.d1 = static_cast<double>(std::sqrt(group_sums(base, tuned, part.first()).diff));
  rep.d2 = static_cast<double>(std::sqrt(group_sums(base, tuned, part.last()).diff));
  return rep;
}

template <typename Real>
ParameterMap<Real> perturb_front_layers(const ModelConfig& config, const ParameterMap<Real>& params,
                                        std::size_t s_front, double target, std::uint64_t seed) {
  if (!(target >= 0.0) || !std::isfinite(target)) throw ConfigError("perturbation target must be >= 0");
  if (s_front < 1 || s_front > config.n_layers) throw ConfigError("s_front must lie in [1, n_layers]");
  ParameterMap<Real> out = params;
  if (target == 0.0) return out;

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t l = 0; l < s_front; ++l) {
    std::vector<const Real*> base;
    std::vector<Real*> dst;
    for (const auto& name : names::layer_params(l)) {
      const Tensor<Real>& src = params.at(name).value;
      Tensor<Real>& t = out.at(name).value;
      for (std::size_t i = 0; i < src.size(); ++i) {
        base.push_back(&src[i]);
        dst.push_back(&t[i]);
      }
    }
    const std::size_t n = base.size();
    long double base_sq = 0;
    for (const Real* b : base) base_sq += static_cast<long double>(*b) * *b;
    if (base_sq == 0) throw ConfigError("layer " + std::to_string(l) + " has zero norm; relative drift undefined");
    const long double want = static_cast<long double>(target) * std::sqrt(base_sq);

    std::vector<long double> z(n);
    long double z_sq = 0;
    for (auto& v : z) {
      v = normal(rng);
      z_sq += v * v;
    }
    const long double k = want / std::sqrt(z_sq);
    for (std::size_t i = 0; i < n; ++i) *dst[i] = static_cast<Real>(*base[i] + z[i] * k);

    // Rounding each coordinate leaves a relative error around 1e-12. Solve
    // for one coordinate at a time so the norm lands on the target.
    auto diff = [&](std::size_t i) { return static_cast<long double>(*dst[i]) - static_cast<long double>(*base[i]); };
    std::set<std::size_t> used;
    for (int round = 0; round < 16; ++round) {
      long double r_sq = 0;
      for (std::size_t i = 0; i < n; ++i) r_sq += diff(i) * diff(i);
      if (std::abs(std::sqrt(r_sq) - want) <= 1e-15L * want) break;
      std::size_t j = n;
      long double best = -1;
      for (std::size_t i = 0; i < n; ++i)
        if (!used.count(i) && std::abs(diff(i)) > best) {
          best = std::abs(diff(i));
          j = i;
        }
      if (j == n) break;
      used.insert(j);
      const long double ej = diff(j);
      const long double need = ej * ej + (want * want - r_sq);
      const long double ej_new = std::copysign(std::sqrt(std::max<long double>(need, 0)), ej);
      *dst[j] = static_cast<Real>(*base[j] + ej_new);
    }
  }
  return out;
}

template <typename Real>
ResidualStats recon_residual_stats(const Transformer<Real>& model, const AuxHead<Real>& head, const TokenBatch& batch,
                                   int pad_id) {
  Tape<Real> tape(false);
  FirstHalf<Real> fh = model.forward_first_half(tape, batch);
  const Tensor<Real>& g = head.forward(tape, fh.h1).value();
  const Tensor<Real>& h0 = fh.h0.value();
  const std::size_t d = h0.cols();
  ResidualStats s;
  for (std::size_t r = 0; r < h0.rows(); ++r) {
    if (batch.ids[r] == pad_id) continue;
    long double sq = 0;
    for (std::size_t c = 0; c < d; ++c) {
      const long double e = static_cast<long double>(g[r * d + c]) - h0[r * d + c];
      sq += e * e;
    }
    s.norms.push_back(static_cast<double>(std::sqrt(sq)));
  }
  for (double v : s.norms) {
    s.mean += v;
    s.max = std::max(s.max, v);
  }
  if (!s.norms.empty()) s.mean /= static_cast<double>(s.norms.size());
  return s;
}

namespace {

double norm(const std::vector<double>& v) {
  long double s = 0;
  for (double x : v) s += static_cast<long double>(x) * x;
  return static_cast<double>(std::sqrt(s));
}

}  // namespace

double spectral_norm_estimate(const LinearOperator& op, const PowerIterationOptions& opts) {
  if (op.in_dim == 0) return 0.0;
  double best = 0.0;
  for (std::size_t restart = 0; restart < std::max<std::size_t>(opts.restarts, 1); ++restart) {
    std::mt19937_64 rng(opts.seed * 7919 + restart);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(op.in_dim);
    for (double& x : v) x = normal(rng);
    double nv = norm(v);
    if (nv == 0) continue;
    for (double& x : v) x /= nv;
    bool zero = false;
    for (std::size_t it = 0; it < opts.iters; ++it) {
      std::vector<double> w = op.apply_transpose(op.apply(v));
      const double nw = norm(w);
      if (nw == 0) {
        zero = true;
        break;
      }
      for (std::size_t i = 0; i < w.size(); ++i) v[i] = w[i] / nw;
    }
    if (zero) continue;
    best = std::max(best, norm(op.apply(v)));
  }
  return best;
}

namespace {

template <typename Real>
std::vector<double> to_doubles(const Tensor<Real>& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

template <typename Real>
Tensor<Real> from_doubles(const Shape& shape, const std::vector<double>& v) {
  Tensor<Real> t(shape);
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<Real>(v[i]);
  return t;
}

}  // namespace

template <typename Real>
LinearOperator jacobian_operator(const ag::ScalarBuilder<Real>& map, const Tensor<Real>& point, double fd_eps) {
  LinearOperator op;
  op.in_dim = point.size();
  op.apply = [map, point, fd_eps](const std::vector<double>& v) {
    Tensor<Real> plus = point, minus = point;
    for (std::size_t i = 0; i < v.size(); ++i) {
      plus[i] = static_cast<Real>(plus[i] + fd_eps * v[i]);
      minus[i] = static_cast<Real>(minus[i] - fd_eps * v[i]);
    }
    Tape<Real> tape(false);
    const Tensor<Real> up = map(tape, tape.constant(plus)).value();
    const Tensor<Real> down = map(tape, tape.constant(minus)).value();
    std::vector<double> out(up.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = (static_cast<double>(up[i]) - static_cast<double>(down[i])) / (2.0 * fd_eps);
    return out;
  };
  op.apply_transpose = [map, point](const std::vector<double>& u) {
    Tape<Real> tape;
    Var<Real> x = tape.variable(point);
    Var<Real> y = map(tape, x);
    std::vector<Real> w(u.begin(), u.end());
    tape.backward(ag::weighted_sum(y, std::span<const Real>(w)));
    const Tensor<Real>* g = tape.grad(x);
    return g ? to_doubles(*g) : std::vector<double>(point.size(), 0.0);
  };
  return op;
}

template <typename Real>
LinearOperator k2_boundary_operator(const Transformer<Real>& model, const Tensor<Real>& boundary, double fd_eps) {
  const Transformer<Real>* m = &model;
  return jacobian_operator<Real>([m](Tape<Real>& t, Var<Real> x) { return m->forward_second_half(t, x); }, boundary,
                                 fd_eps);
}

template <typename Real>
LinearOperator aux_boundary_operator(const AuxHead<Real>& head, const Tensor<Real>& boundary, double fd_eps) {
  const AuxHead<Real>* h = &head;
  return jacobian_operator<Real>([h](Tape<Real>& t, Var<Real> x) { return h->forward(t, x); }, boundary, fd_eps);
}

template <typename Real>
LinearOperator k1_param_operator(Transformer<Real>& model, const TokenBatch& batch, double fd_eps) {
  Transformer<Real>* m = &model;
  std::size_t dim = 0;
  for (const auto* p : std::as_const(model).block_params(0)) dim += p->value.size();
  LinearOperator op;
  op.in_dim = dim;
  op.apply = [m, batch, fd_eps](const std::vector<double>& v) {
    auto group = m->block_params(0);
    std::vector<Tensor<Real>> orig;
    for (auto* p : group) orig.push_back(p->value);
    auto shift = [&](double sign) {
      std::size_t k = 0;
      for (std::size_t g = 0; g < group.size(); ++g)
        for (std::size_t i = 0; i < orig[g].size(); ++i, ++k)
          group[g]->value[i] = static_cast<Real>(orig[g][i] + sign * fd_eps * v[k]);
      return m->first_half_values(batch);
    };
    Tensor<Real> up, down;
    try {
      up = shift(1.0);
      down = shift(-1.0);
    } catch (...) {
      for (std::size_t g = 0; g < group.size(); ++g) group[g]->value = orig[g];
      throw;
    }
    for (std::size_t g = 0; g < group.size(); ++g) group[g]->value = orig[g];
    std::vector<double> out(up.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = (static_cast<double>(up[i]) - static_cast<double>(down[i])) / (2.0 * fd_eps);
    return out;
  };
  op.apply_transpose = [m, batch, dim](const std::vector<double>& u) {
    Tape<Real> tape;
    FirstHalf<Real> fh = m->forward_first_half(tape, batch);
    std::vector<Real> w(u.begin(), u.end());
    GradStore<Real> grads = tape.backward(ag::weighted_sum(fh.h1, std::span<const Real>(w)));
    std::vector<double> out;
    out.reserve(dim);
    for (const auto* p : std::as_const(*m).block_params(0)) {
      const Tensor<Real>* g = grads.find(*p);
      for (std::size_t i = 0; i < p->value.size(); ++i) out.push_back(g ? static_cast<double>((*g)[i]) : 0.0);
    }
    return out;
  };
  return op;
}

template <typename Real>
double interface_drift_gamma(const Transformer<Real>& model, const ParameterMap<Real>& u_next,
                             const std::vector<TaskChunk<Real>>& chunks) {
  Transformer<Real> swapped = model;
  for (const auto& name : model.partition().first()) {
    auto it = u_next.find(name);
    if (it == u_next.end()) throw ConfigError("interface drift: missing first-block parameter " + name);
    if (it->second.value.shape() != model.param(name).value.shape())
      throw ShapeError("interface drift: shape mismatch for " + name);
    swapped.param(name).value = it->second.value;
  }
  auto loss = [&](const Transformer<Real>& m) {
    long double total = 0;
    for (const auto& c : chunks) {
      Tape<Real> tape(false);
      total += c.loss(m.forward(tape, c.tokens)).value().item();
    }
    return static_cast<double>(total);
  };
  return std::abs(loss(swapped) - loss(model));
}

template <typename Real>
TriangleReport triangle_noncollapse_check(const Transformer<Real>& model, const AuxHead<Real>& head,
                                          const std::vector<std::pair<TokenBatch, TokenBatch>>& pairs,
                                          double tolerance) {
  struct States {
    Tensor<Real> h0, g;
  };
  auto states = [&](const TokenBatch& b) {
    Tape<Real> tape(false);
    FirstHalf<Real> fh = model.forward_first_half(tape, b);
    return States{fh.h0.value(), head.forward(tape, fh.h1).value()};
  };
  auto dist = [](const Tensor<Real>& a, const Tensor<Real>& b) {
    long double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const long double e = static_cast<long double>(a[i]) - b[i];
      s += e * e;
    }
    return std::sqrt(s);
  };
  TriangleReport rep;
  rep.min_slack = std::numeric_limits<double>::infinity();
  for (const auto& [a, b] : pairs) {
    if (a.batch != b.batch || a.seq_len != b.seq_len) throw ShapeError("triangle check pair shapes differ");
    const States x = states(a), y = states(b);
    const long double lhs = dist(x.h0, y.h0);
    const long double rhs = dist(x.h0, x.g) + dist(x.g, y.g) + dist(y.g, y.h0);
    const double slack = static_cast<double>(rhs - lhs);
    rep.min_slack = std::min(rep.min_slack, slack);
    rep.max_violation = std::max(rep.max_violation, -slack);
    if (-slack > tolerance) ++rep.violations;
    ++rep.pairs;
  }
  if (rep.pairs == 0) rep.min_slack = 0.0;
  return rep;
}

#define LOPT_INSTANTIATE(Real)                                                                               \
  template DriftReport layer_drift(const ModelConfig&, const ParameterMap<Real>&, const ParameterMap<Real>&); \
  template ParameterMap<Real> perturb_front_layers(const ModelConfig&, const ParameterMap<Real>&, std::size_t, \
                                                   double, std::uint64_t);                                    \
  template ResidualStats recon_residual_stats(const Transformer<Real>&, const AuxHead<Real>&,                 \
                                              const TokenBatch&, int);                                        \
  template LinearOperator jacobian_operator(const ag::ScalarBuilder<Real>&, const Tensor<Real>&, double);     \
  template LinearOperator k2_boundary_operator(const Transformer<Real>&, const Tensor<Real>&, double);        \
  template LinearOperator aux_boundary_operator(const AuxHead<Real>&, const Tensor<Real>&, double);           \
  template LinearOperator k1_param_operator(Transformer<Real>&, const TokenBatch&, double);                   \
  template double interface_drift_gamma(const Transformer<Real>&, const ParameterMap<Real>&,                  \
                                        const std::vector<TaskChunk<Real>>&);                                 \
  template TriangleReport triangle_noncollapse_check(const Transformer<Real>&, const AuxHead<Real>&,          \
                                                     const std::vector<std::pair<TokenBatch, TokenBatch>>&,   \
                                                     double);

LOPT_INSTANTIATE(float)
LOPT_INSTANTIATE(double)

#undef LOPT_INSTANTIATE

}  // namespace lopt
