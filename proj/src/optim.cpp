#include "lopt/optim.hpp"

#include <cmath>

namespace lopt {

const char* to_string(OptimizerKind kind) { return kind == OptimizerKind::kAdamW ? "adamw" : "sgd"; }

OptimizerKind parse_optimizer_kind(const std::string& text) {
  if (text == "adamw") return OptimizerKind::kAdamW;
  if (text == "sgd") return OptimizerKind::kSgd;
  throw ConfigError("unknown optimizer '" + text + "'");
}

void OptimizerConfig::validate() const {
  auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
  if (!finite_nonneg(lr)) throw ConfigError("optimizer lr must be finite and non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("optimizer betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("optimizer eps must be positive");
  if (!finite_nonneg(weight_decay)) throw ConfigError("weight_decay must be non-negative");
  if (max_grad_norm && !(*max_grad_norm > 0.0)) throw ConfigError("max_grad_norm must be positive");
}

template <typename Real>
Optimizer<Real>::Optimizer(OptimizerConfig config, std::vector<Parameter<Real>*> group)
    : config_(config), group_(std::move(group)) {
  config_.validate();
  if (config_.kind == OptimizerKind::kAdamW) {
    for (const auto* p : group_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }
}

template <typename Real>
std::size_t Optimizer<Real>::state_bytes() const {
  std::size_t n = 0;
  for (const auto& t : m_) n += t.bytes();
  for (const auto& t : v_) n += t.bytes();
  return n;
}

template <typename Real>
double grad_norm(const GradStore<Real>& grads, const std::vector<const Parameter<Real>*>& params) {
  long double sq = 0;
  for (const auto* p : params)
    if (const Tensor<Real>* g = grads.find(*p)) sq += squared_norm(g->values());
  return static_cast<double>(std::sqrt(sq));
}

template <typename Real>
OptimizerStepStats Optimizer<Real>::step(const GradStore<Real>& grads) {
  std::vector<const Tensor<Real>*> gs;
  gs.reserve(group_.size());
  for (const auto* p : group_) {
    const Tensor<Real>* g = grads.find(*p);
    if (!g) throw ContractError("no gradient for parameter " + p->name);
    if (g->shape() != p->value.shape()) throw ShapeError("gradient shape differs for " + p->name);
    if (!g->all_finite()) throw NumericsError("non-finite gradient for " + p->name);
    gs.push_back(g);
  }
  OptimizerStepStats stats;
  stats.grad_norm = grad_norm(grads, std::vector<const Parameter<Real>*>(group_.begin(), group_.end()));
  double coef = 1.0;
  if (config_.max_grad_norm && stats.grad_norm > *config_.max_grad_norm) {
    coef = *config_.max_grad_norm / (stats.grad_norm + 1e-6);
    stats.clipped = true;
  }

  ++step_;
  const double lr = config_.lr;
  if (config_.kind == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < group_.size(); ++i) {
      Real* w = group_[i]->value.data();
      const Real* g = gs[i]->data();
      for (std::size_t j = 0; j < group_[i]->value.size(); ++j) {
        const double gj = coef * g[j];
        w[j] = static_cast<Real>(w[j] - lr * config_.weight_decay * w[j] - lr * gj);
      }
    }
    return stats;
  }

  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < group_.size(); ++i) {
    Real* w = group_[i]->value.data();
    Real* m = m_[i].data();
    Real* v = v_[i].data();
    const Real* g = gs[i]->data();
    for (std::size_t j = 0; j < group_[i]->value.size(); ++j) {
      const double gj = coef * g[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<Real>(mj);
      v[j] = static_cast<Real>(vj);
      const double update = (mj / c1) / (std::sqrt(vj / c2) + config_.eps);
      w[j] = static_cast<Real>(w[j] - lr * config_.weight_decay * w[j] - lr * update);
    }
  }
  return stats;
}

template class Optimizer<float>;
template class Optimizer<double>;
template double grad_norm(const GradStore<float>&, const std::vector<const Parameter<float>*>&);
template double grad_norm(const GradStore<double>&, const std::vector<const Parameter<double>*>&);

}  // namespace lopt
