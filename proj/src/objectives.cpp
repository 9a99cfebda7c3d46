#include "lopt/objectives.hpp"

#include <cmath>
#include <random>

namespace lopt {

std::size_t aux_head_param_count(std::size_t d) { return d * d / 2 + 3 * d + d / 4; }

const char* to_string(LocalObjective kind) {
  switch (kind) {
    case LocalObjective::kRecon:
      return "recon";
    case LocalObjective::kNtp:
      return "ntp";
    case LocalObjective::kNtpPlusRecon:
      return "ntp_plus_recon";
  }
  return "?";
}

LocalObjective parse_local_objective(const std::string& text) {
  if (text == "recon") return LocalObjective::kRecon;
  if (text == "ntp") return LocalObjective::kNtp;
  if (text == "ntp_plus_recon") return LocalObjective::kNtpPlusRecon;
  throw ConfigError("unknown objective kind '" + text + "'");
}

void LossConfig::validate() const {
  if (!(lambda_aux > 0.0) || !std::isfinite(lambda_aux)) throw ConfigError("lambda_aux must be positive");
  if (!(ntp_weight >= 0.0) || !std::isfinite(ntp_weight)) throw ConfigError("ntp_weight must be non-negative");
}

template <typename Real>
std::size_t Supervision<Real>::count() const {
  std::size_t n = 0;
  for (Real m : mask) n += m != Real(0);
  return n;
}

// ---------------------------------------------------------------------------

template <typename Real>
AuxHead<Real>::AuxHead(std::size_t d, std::string prefix, ParameterMap<Real> params)
    : d_(d), prefix_(std::move(prefix)), params_(std::move(params)) {
  const std::size_t b = d / 4;
  const std::pair<const char*, Shape> expected[] = {{".ln.gain", {d}}, {".ln.bias", {d}}, {".w1", {b, d}},
                                                    {".b1", {b}},      {".w2", {d, b}},     {".b2", {d}}};
  if (params_.size() != std::size(expected)) throw ConfigError("aux head has unexpected parameters");
  for (const auto& [suffix, shape] : expected) {
    auto it = params_.find(prefix_ + suffix);
    if (it == params_.end()) throw ConfigError("aux head is missing " + prefix_ + suffix);
    if (it->second.value.shape() != shape) throw ShapeError("aux head " + prefix_ + suffix + " has wrong shape");
  }
}

template <typename Real>
AuxHead<Real> AuxHead<Real>::init(std::size_t d, std::uint64_t seed, std::string prefix) {
  if (d == 0 || d % 4 != 0) throw ConfigError("aux head width must be a positive multiple of 4");
  std::mt19937_64 rng(seed);
  const std::size_t b = d / 4;
  ParameterMap<Real> params;
  auto put = [&](const std::string& suffix, Tensor<Real> t) {
    params.emplace(prefix + suffix, Parameter<Real>{prefix + suffix, std::move(t)});
  };
  auto xavier = [&](std::size_t out, std::size_t in) {
    const double bound = 0.1 * std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor<Real> t({out, in});
    for (Real& v : t.values()) v = static_cast<Real>(u(rng));
    return t;
  };
  put(".ln.gain", Tensor<Real>({d}, Real(1)));
  put(".ln.bias", Tensor<Real>({d}));
  put(".w1", xavier(b, d));
  put(".b1", Tensor<Real>({b}));
  put(".w2", xavier(d, b));
  put(".b2", Tensor<Real>({d}));
  return AuxHead(d, std::move(prefix), std::move(params));
}

template <typename Real>
AuxHead<Real> AuxHead<Real>::from_params(std::size_t d, ParameterMap<Real> params, std::string prefix) {
  for (auto& [name, p] : params) p.name = name;
  return AuxHead(d, std::move(prefix), std::move(params));
}

template <typename Real>
std::vector<Parameter<Real>*> AuxHead<Real>::param_list() {
  std::vector<Parameter<Real>*> out;
  for (auto& [_, p] : params_) out.push_back(&p);
  return out;
}

template <typename Real>
std::vector<const Parameter<Real>*> AuxHead<Real>::param_list() const {
  std::vector<const Parameter<Real>*> out;
  for (const auto& [_, p] : params_) out.push_back(&p);
  return out;
}

template <typename Real>
std::size_t AuxHead<Real>::param_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

template <typename Real>
Var<Real> AuxHead<Real>::p(Tape<Real>& tape, const char* suffix) const {
  return tape.param(params_.at(prefix_ + suffix));
}

template <typename Real>
Var<Real> AuxHead<Real>::forward(Tape<Real>& tape, Var<Real> h) const {
  if (h.value().cols() != d_)
    throw ShapeError("aux head expects width " + std::to_string(d_) + ", got " + shape_string(h.shape()));
  Var<Real> x = ag::layernorm(h, p(tape, ".ln.gain"), p(tape, ".ln.bias"));
  x = ag::gelu(ag::add(ag::matmul(x, p(tape, ".w1"), true), p(tape, ".b1")));
  return ag::add(ag::matmul(x, p(tape, ".w2"), true), p(tape, ".b2"));
}

// ---------------------------------------------------------------------------

template <typename Real>
LocalDecoder<Real> LocalDecoder<Real>::init(std::size_t d, std::size_t vocab, std::uint64_t seed, double init_std) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, init_std);
  Tensor<Real> w({vocab, d});
  for (Real& v : w.values()) v = static_cast<Real>(normal(rng));
  ParameterMap<Real> params;
  params.emplace("ntp.w", Parameter<Real>{"ntp.w", std::move(w)});
  params.emplace("ntp.b", Parameter<Real>{"ntp.b", Tensor<Real>({vocab})});
  return LocalDecoder(std::move(params));
}

template <typename Real>
LocalDecoder<Real> LocalDecoder<Real>::from_params(ParameterMap<Real> params) {
  if (!params.count("ntp.w") || !params.count("ntp.b") || params.size() != 2)
    throw ConfigError("local decoder needs exactly ntp.w and ntp.b");
  for (auto& [name, p] : params) p.name = name;
  return LocalDecoder(std::move(params));
}

template <typename Real>
std::vector<Parameter<Real>*> LocalDecoder<Real>::param_list() {
  std::vector<Parameter<Real>*> out;
  for (auto& [_, p] : params_) out.push_back(&p);
  return out;
}

template <typename Real>
Var<Real> LocalDecoder<Real>::forward(Tape<Real>& tape, Var<Real> h) const {
  return ag::add(ag::matmul(h, tape.param(params_.at("ntp.w")), true), tape.param(params_.at("ntp.b")));
}

// ---------------------------------------------------------------------------

template <typename Real>
Var<Real> aux_recon_loss(Tape<Real>& tape, const AuxHead<Real>& head, Var<Real> h1, Var<Real> h0,
                         std::span<const Real> row_mask) {
  if (h1.shape() != h0.shape())
    throw ShapeError("aux loss shapes differ: " + shape_string(h1.shape()) + " vs " + shape_string(h0.shape()));
  return ag::mse(head.forward(tape, h1), ag::stop_gradient(h0), row_mask);
}

template <typename Real>
Var<Real> sft_loss(Var<Real> logits, const Supervision<Real>& sup) {
  const Tensor<Real>& v = logits.value();
  const std::size_t rows = v.rows();
  if (sup.targets.size() != rows || sup.mask.size() != rows)
    throw ShapeError("supervision covers " + std::to_string(sup.targets.size()) + " positions, logits have " +
                     std::to_string(rows));
  const std::size_t n = sup.count();
  if (n == 0) throw ContractError("empty prediction mask");
  std::vector<Real> weights(rows);
  for (std::size_t i = 0; i < rows; ++i) weights[i] = sup.mask[i] != Real(0) ? Real(-1.0 / n) : Real(0);
  Var<Real> picked = ag::gather(ag::log_softmax(logits), std::span<const int>(sup.targets));
  return ag::weighted_sum(picked, std::span<const Real>(weights));
}

template <typename Real>
Var<Real> local_ntp_loss(Tape<Real>& tape, const LocalDecoder<Real>& decoder, Var<Real> h1,
                         const Supervision<Real>& sup) {
  return sft_loss(decoder.forward(tape, h1), sup);
}

template <typename Real>
LocalLoss<Real> local_objective(Tape<Real>& tape, const LossConfig& cfg, const AuxHead<Real>* head,
                                const LocalDecoder<Real>* decoder, Var<Real> h1, Var<Real> h0,
                                std::span<const Real> row_mask, const Supervision<Real>& sup) {
  LocalLoss<Real> out;
  const bool use_recon = cfg.kind != LocalObjective::kNtp;
  const bool use_ntp = cfg.kind != LocalObjective::kRecon;
  std::vector<Var<Real>> terms;
  if (use_recon) {
    if (!head) throw ContractError("reconstruction objective without an aux head");
    Var<Real> l = aux_recon_loss(tape, *head, h1, h0, row_mask);
    out.recon = static_cast<double>(l.value().item());
    terms.push_back(ag::scale(l, cfg.lambda_aux));
  }
  if (use_ntp) {
    if (!decoder) throw ContractError("next-token objective without a local decoder");
    Var<Real> l = local_ntp_loss(tape, *decoder, h1, sup);
    out.ntp = static_cast<double>(l.value().item());
    terms.push_back(cfg.kind == LocalObjective::kNtp ? l : ag::scale(l, cfg.ntp_weight));
  }
  out.total = terms.size() == 1 ? terms[0] : ag::add(terms[0], terms[1]);
  return out;
}

#define LOPT_INSTANTIATE(Real)                                                                              \
  template struct Supervision<Real>;                                                                        \
  template class AuxHead<Real>;                                                                             \
  template class LocalDecoder<Real>;                                                                        \
  template Var<Real> aux_recon_loss(Tape<Real>&, const AuxHead<Real>&, Var<Real>, Var<Real>,                \
                                    std::span<const Real>);                                                 \
  template Var<Real> sft_loss(Var<Real>, const Supervision<Real>&);                                         \
  template Var<Real> local_ntp_loss(Tape<Real>&, const LocalDecoder<Real>&, Var<Real>,                      \
                                    const Supervision<Real>&);                                              \
  template LocalLoss<Real> local_objective(Tape<Real>&, const LossConfig&, const AuxHead<Real>*,            \
                                           const LocalDecoder<Real>*, Var<Real>, Var<Real>,                 \
                                           std::span<const Real>, const Supervision<Real>&);

LOPT_INSTANTIATE(float)
LOPT_INSTANTIATE(double)

#undef LOPT_INSTANTIATE

}  // namespace lopt
