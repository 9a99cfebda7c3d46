#include "lopt/grpo.hpp"

#include <charconv>
#include <cmath>
#include <numeric>

namespace lopt {

void GrpoConfig::validate() const {
  if (group_size < 2) throw ConfigError("grpo group_size must be at least 2");
  if (prompts_per_step == 0) throw ConfigError("grpo prompts_per_step must be positive");
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("grpo clip_eps must lie in (0, 1)");
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) throw ConfigError("grpo temperature must be >= 0");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("grpo top_p must lie in (0, 1]");
  if (max_new_tokens == 0) throw ConfigError("grpo max_new_tokens must be positive");
  if (!(std_eps >= 0.0)) throw ConfigError("grpo std_eps must be >= 0");
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

template <typename Real>
int sample_token(std::span<const Real> logits, double temperature, double top_p, double u) {
  if (logits.empty()) throw ContractError("sampling from empty logits");
  const std::size_t V = logits.size();
  if (temperature == 0.0) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < V; ++i)
      if (logits[i] > logits[best]) best = i;
    return static_cast<int>(best);
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (Real v : logits) mx = std::max(mx, static_cast<double>(v) / temperature);
  std::vector<double> p(V);
  double total = 0.0;
  for (std::size_t i = 0; i < V; ++i) total += (p[i] = std::exp(static_cast<double>(logits[i]) / temperature - mx));
  for (double& x : p) x /= total;

  std::vector<std::size_t> order(V);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] != p[b] ? p[a] > p[b] : a < b; });
  std::size_t keep = 0;
  double mass = 0.0;
  while (keep < V) {
    mass += p[order[keep++]];
    if (mass >= top_p) break;
  }
  const double target = u * mass;
  double run = 0.0;
  for (std::size_t k = 0; k < keep; ++k) {
    run += p[order[k]];
    if (target < run) return static_cast<int>(order[k]);
  }
  return static_cast<int>(order[keep - 1]);
}

template <typename Real>
std::vector<RolloutGroup> sample_rollouts(const Transformer<Real>& model, const std::vector<Example>& prompts,
                                          const GrpoConfig& cfg, std::uint64_t seed, const Tokenizer& tok) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const std::size_t V = model.config().vocab_size;
  std::vector<RolloutGroup> groups;
  groups.reserve(prompts.size());
  for (const auto& ex : prompts) {
    RolloutGroup g;
    g.prompt.push_back(Tokenizer::kBos);
    for (int id : tok.encode(ex.prompt)) g.prompt.push_back(id);
    g.answer = ex.answer;
    if (g.prompt.size() + cfg.max_new_tokens > model.config().max_seq_len)
      throw ConfigError("prompt plus max_new_tokens exceeds max_seq_len");
    g.samples.resize(cfg.group_size);

    std::vector<std::size_t> active(cfg.group_size);
    std::iota(active.begin(), active.end(), 0);
    for (std::size_t t = 0; t < cfg.max_new_tokens && !active.empty(); ++t) {
      // Active rows share one length, so they decode as a single batch.
      const std::size_t len = g.prompt.size() + t;
      TokenBatch batch{active.size(), len, {}};
      batch.ids.reserve(active.size() * len);
      for (std::size_t row : active) {
        batch.ids.insert(batch.ids.end(), g.prompt.begin(), g.prompt.end());
        const auto& resp = g.samples[row].response;
        batch.ids.insert(batch.ids.end(), resp.begin(), resp.end());
      }
      const Tensor<Real> logits = model.logits(batch);
      std::vector<std::size_t> still;
      for (std::size_t a = 0; a < active.size(); ++a) {
        std::span<const Real> last(logits.data() + ((a + 1) * len - 1) * V, V);
        const int id = sample_token(last, cfg.temperature, cfg.top_p, uniform01(rng));
        double mx = -std::numeric_limits<double>::infinity();
        for (Real v : last) mx = std::max(mx, static_cast<double>(v));
        double z = 0.0;
        for (Real v : last) z += std::exp(static_cast<double>(v) - mx);
        Rollout& r = g.samples[active[a]];
        r.response.push_back(id);
        r.old_logp.push_back(static_cast<double>(last[id]) - mx - std::log(z));
        if (id != Tokenizer::kEos) still.push_back(active[a]);
      }
      active = std::move(still);
    }
    for (std::size_t row : active) g.samples[row].truncated = true;
    groups.push_back(std::move(g));
  }
  return groups;
}

std::optional<long long> parse_first_integer(const std::string& text) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] < '0' || text[i] > '9') continue;
    std::size_t end = i;
    while (end < text.size() && text[end] >= '0' && text[end] <= '9') ++end;
    const std::size_t begin = i > 0 && text[i - 1] == '-' ? i - 1 : i;
    long long value = 0;
    auto [ptr, ec] = std::from_chars(text.data() + begin, text.data() + end, value);
    if (ec != std::errc()) return std::nullopt;
    return value;
  }
  return std::nullopt;
}

double exact_match_reward(const std::string& response, long long answer) {
  const auto v = parse_first_integer(response);
  return v && *v == answer ? 1.0 : 0.0;
}

void compute_rewards(std::vector<RolloutGroup>& groups, const Tokenizer& tok) {
  for (auto& g : groups)
    for (auto& s : g.samples) {
      std::vector<int> text_ids;
      for (int id : s.response) {
        if (id == Tokenizer::kEos) break;
        text_ids.push_back(id);
      }
      s.reward = exact_match_reward(tok.decode(text_ids), g.answer);
    }
}

std::vector<double> normalize_advantages(std::span<const double> rewards, double std_eps) {
  if (rewards.size() < 2) throw ContractError("advantage normalization needs at least two samples");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out;
  out.reserve(rewards.size());
  for (double r : rewards) {
    const double num = r - mean;
    out.push_back(num == 0.0 ? 0.0 : num / (sd + std_eps));
  }
  return out;
}

void assign_advantages(std::vector<RolloutGroup>& groups, double std_eps) {
  for (auto& g : groups) {
    std::vector<double> rewards;
    for (const auto& s : g.samples) rewards.push_back(s.reward);
    const auto adv = normalize_advantages(rewards, std_eps);
    for (std::size_t i = 0; i < adv.size(); ++i) g.samples[i].advantage = adv[i];
  }
}

double grpo_clipped_loss(std::span<const double> new_logp, std::span<const double> old_logp,
                         std::span<const double> advantages, std::span<const std::size_t> lengths, double eps) {
  const std::size_t total = std::accumulate(lengths.begin(), lengths.end(), std::size_t{0});
  if (new_logp.size() != total || old_logp.size() != total || advantages.size() != total)
    throw ContractError("grpo loss inputs are not token-aligned");
  if (lengths.empty()) throw ContractError("grpo loss over no sequences");
  long double acc = 0;
  std::size_t k = 0;
  for (std::size_t len : lengths) {
    if (len == 0) throw ContractError("grpo loss over an empty response");
    long double seq = 0;
    for (std::size_t t = 0; t < len; ++t, ++k) {
      const double r = std::exp(new_logp[k] - old_logp[k]);
      seq += std::min(r * advantages[k], std::clamp(r, 1.0 - eps, 1.0 + eps) * advantages[k]);
    }
    acc += seq / static_cast<long double>(len);
  }
  return static_cast<double>(-acc / static_cast<long double>(lengths.size()));
}

namespace {

/// Flat per-position arrays of one padded block of rollout rows.
template <typename Real>
struct PolicyRows {
  TokenBatch tokens;
  std::vector<int> targets;
  std::vector<Real> old_logp, adv, weight;
};

template <typename Real>
PolicyRows<Real> build_rows(const std::vector<std::pair<const RolloutGroup*, const Rollout*>>& rows, double norm) {
  PolicyRows<Real> out;
  std::size_t L = 0;
  for (const auto& [g, s] : rows) L = std::max(L, g->prompt.size() + s->response.size());
  out.tokens = TokenBatch{rows.size(), L, std::vector<int>(rows.size() * L, Tokenizer::kPad)};
  out.targets.assign(rows.size() * L, 0);
  out.old_logp.assign(rows.size() * L, Real(0));
  out.adv.assign(rows.size() * L, Real(0));
  out.weight.assign(rows.size() * L, Real(0));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& [g, s] = rows[r];
    const std::size_t plen = g->prompt.size();
    std::copy(g->prompt.begin(), g->prompt.end(), out.tokens.ids.begin() + r * L);
    std::copy(s->response.begin(), s->response.end(), out.tokens.ids.begin() + r * L + plen);
    const Real w = static_cast<Real>(1.0 / (static_cast<double>(s->response.size()) * norm));
    for (std::size_t t = 0; t < s->response.size(); ++t) {
      const std::size_t pos = r * L + plen + t - 1;  // logits here predict response token t
      out.targets[pos] = s->response[t];
      out.old_logp[pos] = static_cast<Real>(s->old_logp[t]);
      out.adv[pos] = static_cast<Real>(s->advantage);
      out.weight[pos] = w;
    }
  }
  return out;
}

template <typename Real>
TaskChunk<Real> policy_chunk(PolicyRows<Real> rows, double eps) {
  TokenBatch tokens = rows.tokens;
  return {std::move(tokens), [rows = std::move(rows), eps](Var<Real> logits) {
            Var<Real> lp = ag::gather(ag::log_softmax(logits), std::span<const int>(rows.targets));
            return ag::clipped_surrogate(lp, std::span<const Real>(rows.old_logp), std::span<const Real>(rows.adv),
                                         std::span<const Real>(rows.weight), eps);
          }};
}

}  // namespace

template <typename Real>
StepInput<Real> make_grpo_input(const std::vector<RolloutGroup>& groups, const GrpoConfig& cfg) {
  if (groups.empty()) throw ContractError("grpo step without rollouts");
  std::vector<std::pair<const RolloutGroup*, const Rollout*>> rows;
  for (const auto& g : groups) {
    if (g.samples.size() != cfg.group_size) throw ContractError("rollout group size differs from config");
    for (const auto& s : g.samples) {
      if (s.response.empty() || s.response.size() != s.old_logp.size())
        throw ContractError("rollout response and old log-probs are misaligned");
      rows.emplace_back(&g, &s);
    }
  }
  const double norm = static_cast<double>(cfg.group_size * groups.size());
  StepInput<Real> in;
  PolicyRows<Real> all = build_rows<Real>(rows, norm);
  in.tokens = all.tokens;
  in.row_mask = non_padding_rows<Real>(in.tokens, Tokenizer::kPad);
  in.local_sup = next_token_supervision<Real>(in.tokens, Tokenizer::kPad);
  if (cfg.per_sample_backward) {
    for (const auto& row : rows) in.chunks.push_back(policy_chunk(build_rows<Real>({row}, norm), cfg.clip_eps));
  } else {
    in.chunks.push_back(policy_chunk(std::move(all), cfg.clip_eps));
  }
  return in;
}

template <typename Real>
GrpoStepReport grpo_step(Trainer<Real>& trainer, const std::vector<Example>& prompts, const GrpoConfig& cfg,
                         std::uint64_t seed) {
  std::vector<RolloutGroup> groups = sample_rollouts(trainer.model(), prompts, cfg, seed);
  compute_rewards(groups);
  assign_advantages(groups, cfg.std_eps);
  GrpoStepReport rep;
  std::size_t n = 0;
  for (const auto& g : groups)
    for (const auto& s : g.samples) {
      rep.mean_reward += s.reward;
      rep.truncated += s.truncated;
      ++n;
    }
  rep.mean_reward /= static_cast<double>(n);
  rep.step = trainer.step(make_grpo_input<Real>(groups, cfg));
  return rep;
}

#define LOPT_INSTANTIATE(Real)                                                                              \
  template int sample_token(std::span<const Real>, double, double, double);                                 \
  template std::vector<RolloutGroup> sample_rollouts(const Transformer<Real>&, const std::vector<Example>&, \
                                                     const GrpoConfig&, std::uint64_t, const Tokenizer&);   \
  template StepInput<Real> make_grpo_input<Real>(const std::vector<RolloutGroup>&, const GrpoConfig&);      \
  template GrpoStepReport grpo_step(Trainer<Real>&, const std::vector<Example>&, const GrpoConfig&,         \
                                    std::uint64_t);

LOPT_INSTANTIATE(float)
LOPT_INSTANTIATE(double)

#undef LOPT_INSTANTIATE

}  // namespace lopt
