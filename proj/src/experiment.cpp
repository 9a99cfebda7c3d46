#include "lopt/experiment.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "lopt/checkpoint.hpp"
#include "lopt/errors.hpp"

namespace lopt {

namespace {

// Derives independent streams from the run seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + stream * 0xBF58476D1CE4E5B9ULL + index * 0x94D049BB133111EBULL + 1;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

enum Stream : std::uint64_t { kPretrainData = 1, kTrainData = 2, kRollout = 3, kEvalRollout = 4, kEvalData = 5 };

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ReportError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw ReportError("write failed for " + path.string());
}

Json nullable(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

/// Fixed evaluation examples: the same for every seed and method.
std::vector<Example> eval_examples(const TaskSpec& t, std::size_t n) {
  return generate_task_data(t, n, mix_seed(t.corpus_seed, kEvalData, static_cast<std::uint64_t>(t.kind)));
}

FootprintOptions footprint_options(const ExperimentConfig& c) {
  FootprintOptions f;
  f.mode = c.method == Method::kE2E ? PeakMode::kE2E : PeakMode::kLoPT;
  f.element_bytes = c.precision == Precision::kFloat32 ? 4 : 8;
  auto moments = [](const OptimizerConfig& o) -> std::size_t { return o.kind == OptimizerKind::kAdamW ? 2 : 0; };
  f.optimizer_moments = moments(c.opt_task);
  f.local_optimizer_moments = moments(c.opt_local);
  return f;
}

template <typename Real>
TrainerOptions trainer_options(const ExperimentConfig& c) {
  TrainerOptions o;
  o.method = c.method;
  o.loss = c.loss;
  o.opt_local = c.opt_local;
  o.opt_task = c.opt_task;
  o.measure_interface_drift = c.measure_interface_drift;
  return o;
}

std::string config_echo(const ExperimentConfig& c) { return to_json(c).dump(); }

std::optional<double> ratio_k2_over_k1(const DriftReport& d, std::size_t split, std::size_t n_layers) {
  const auto k1 = d.mean_over(0, split);
  const auto k2 = d.mean_over(split, n_layers);
  if (!k1 || !k2 || *k1 == 0.0) return std::nullopt;
  return *k2 / *k1;
}

}  // namespace

std::string eval_task_key(const TaskSpec& t) { return std::string(to_string(t.kind)) + "/" + to_string(t.split); }

template <typename Real>
double heldout_loss(const Transformer<Real>& model, const std::vector<Example>& examples, std::size_t batch_size) {
  if (examples.empty()) throw InputError("held-out loss over no examples");
  if (batch_size == 0) throw ContractError("batch_size must be positive");
  const std::size_t V = model.config().vocab_size;
  long double total = 0;
  std::size_t count = 0;
  for (std::size_t begin = 0; begin < examples.size(); begin += batch_size) {
    const std::size_t end = std::min(examples.size(), begin + batch_size);
    const std::vector<Example> chunk(examples.begin() + begin, examples.begin() + end);
    const EncodedBatch eb = encode_examples(chunk, default_tokenizer());
    const Supervision<Real> sup = next_token_supervision<Real>(eb.tokens, Tokenizer::kPad, eb.prompt_lens);
    const Tensor<Real> logits = model.logits(eb.tokens);
    for (std::size_t pos = 0; pos < sup.targets.size(); ++pos) {
      if (sup.mask[pos] == Real(0)) continue;
      const Real* row = logits.data() + pos * V;
      double mx = -INFINITY;
      for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(row[v]));
      double z = 0.0;
      for (std::size_t v = 0; v < V; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
      total += mx + std::log(z) - static_cast<double>(row[sup.targets[pos]]);
      ++count;
    }
  }
  if (count == 0) throw InputError("held-out examples have no target tokens");
  return static_cast<double>(total / static_cast<long double>(count));
}

template <typename Real>
double sampled_reward(const Transformer<Real>& model, const std::vector<Example>& prompts, const GrpoConfig& cfg,
                      std::uint64_t seed) {
  auto groups = sample_rollouts(model, prompts, cfg, seed);
  compute_rewards(groups);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& g : groups)
    for (const auto& s : g.samples) {
      sum += s.reward;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

template <typename Real>
Transformer<Real> pretrain_base(const ExperimentConfig& config, Transformer<Real> init, std::uint64_t seed) {
  const PretrainConfig& p = config.pretrain;
  if (p.steps == 0) return init;
  TrainerOptions o;
  o.method = Method::kE2E;
  o.opt_task = p.opt;
  Trainer<Real> trainer(std::move(init), o, seed);
  for (std::size_t step = 0; step < p.steps; ++step) {
    const TaskSpec& task = p.tasks[step % p.tasks.size()];
    const auto examples = generate_task_data(task, p.batch_size, mix_seed(seed, kPretrainData, step));
    const EncodedBatch eb = encode_examples(examples, default_tokenizer());
    const auto sup = next_token_supervision<Real>(eb.tokens, Tokenizer::kPad, eb.prompt_lens);
    trainer.step(make_sft_input(eb.tokens, sup, Tokenizer::kPad));
  }
  return trainer.model();
}

template <typename Real>
SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed, const std::optional<std::filesystem::path>& dir) {
  config.validate();
  SeedResult out;
  out.seed = seed;
  const auto t_pre = std::chrono::steady_clock::now();
  Transformer<Real> base = pretrain_base(config, Transformer<Real>::init(config.model, seed), seed);
  out.pretrain_ms = ms_since(t_pre);
  const ParameterMap<Real> base_params = base.params();
  const std::string echo = config_echo(config);
  if (dir) save_model_checkpoint(*dir / "initial.lpt", base, echo);

  std::vector<std::pair<TaskSpec, std::vector<Example>>> evals;
  for (const auto& t : config.eval_tasks) evals.emplace_back(t, eval_examples(t, config.eval_examples));
  for (const auto& [t, ex] : evals) out.eval_before[eval_task_key(t)] = heldout_loss(base, ex);
  std::vector<Example> reward_prompts;
  if (config.regime == Regime::kGrpo) {
    reward_prompts = eval_examples(config.task, config.eval_examples);
    out.reward_before = sampled_reward(base, reward_prompts, config.grpo, mix_seed(seed, kEvalRollout, 0));
  }

  Trainer<Real> trainer(std::move(base), trainer_options<Real>(config), seed);
  const FootprintOptions fopts = footprint_options(config);
  std::vector<StepReport> reports;
  reports.reserve(config.steps);
  // Ledger of the step with the largest modeled peak.
  double top_modeled = -1.0;
  const auto t_train = std::chrono::steady_clock::now();
  for (std::size_t step = 0; step < config.steps; ++step) {
    StepRecord rec;
    StepReport rep;
    std::size_t rows = 0, seq = 0;
    if (config.regime == Regime::kSft) {
      const auto examples = generate_task_data(config.task, config.batch_size, mix_seed(seed, kTrainData, step));
      const EncodedBatch eb = encode_examples(examples, default_tokenizer());
      const auto sup = next_token_supervision<Real>(eb.tokens, Tokenizer::kPad, eb.prompt_lens);
      rows = eb.tokens.batch;
      seq = eb.tokens.seq_len;
      rep = trainer.step(make_sft_input(eb.tokens, sup, Tokenizer::kPad));
    } else {
      const auto prompts =
          generate_task_data(config.task, config.grpo.prompts_per_step, mix_seed(seed, kTrainData, step));
      GrpoStepReport g = grpo_step(trainer, prompts, config.grpo, mix_seed(seed, kRollout, step));
      rep = std::move(g.step);
      rec.mean_reward = g.mean_reward;
      rows = config.grpo.prompts_per_step * config.grpo.group_size;
      seq = config.model.max_seq_len;
    }
    rec.step = rep.step;
    rec.task_loss = rep.task_loss;
    rec.aux_loss = rep.aux_loss;
    rec.ntp_loss = rep.ntp_loss;
    rec.grad_norm_k1 = rep.grad_norm_k1;
    rec.grad_norm_k2 = rep.grad_norm_k2;
    rec.drift_bound_increment = rep.drift_bound_increment;
    rec.interface_drift = rep.interface_drift;
    const MemoryLedger step_ledger = model_activation_footprint(config.model, rows, seq, fopts);
    rec.modeled_peak_bytes = compare_peak_models(step_ledger, fopts.mode);
    if (rec.modeled_peak_bytes > top_modeled) {
      top_modeled = rec.modeled_peak_bytes;
      out.ledger = step_ledger;
    }
    rec.measured_peak_bytes = rep.memory.overall_peak();
    rec.isolation_violations = rep.isolation.task_grad_in_k1.size() + rep.isolation.aux_grad_outside.size();
    rec.wall_ms = rep.wall_ms;
    out.steps.push_back(rec);
    reports.push_back(std::move(rep));
  }
  out.train_ms = ms_since(t_train);

  const Transformer<Real>& tuned = trainer.model();
  out.drift = layer_drift(config.model, base_params, tuned.params());
  for (const auto& [t, ex] : evals) out.eval_after[eval_task_key(t)] = heldout_loss(tuned, ex);
  if (config.regime == Regime::kGrpo)
    out.reward_after = sampled_reward(tuned, reward_prompts, config.grpo, mix_seed(seed, kEvalRollout, 1));
  out.measured = measured_high_water(reports);

  if (dir) {
    save_checkpoint(*dir / "final.lpt", trainer, echo);
    std::string steps, timing;
    for (const auto& r : out.steps) {
      steps += step_record_json(r).dump() + "\n";
      Json t;
      t["step"] = r.step;
      t["wall_ms"] = r.wall_ms;
      timing += t.dump() + "\n";
    }
    Json tp;
    tp["phase"] = "pretrain";
    tp["wall_ms"] = out.pretrain_ms;
    timing += tp.dump() + "\n";
    write_text(*dir / "steps.jsonl", steps);
    write_text(*dir / "timing.jsonl", timing);
    write_text(*dir / "drift.tsv", drift_tsv(out.drift));
    Json mem;
    mem["A1"] = out.ledger.A1;
    mem["A2"] = out.ledger.A2;
    mem["Ag"] = out.ledger.Ag;
    mem["A_boundary"] = out.ledger.A_boundary;
    mem["M_state"] = out.ledger.M_state;
    mem["M_misc"] = out.ledger.M_misc;
    mem["mode"] = to_string(fopts.mode);
    mem["modeled_peak"] = compare_peak_models(out.ledger, fopts.mode);
    mem["measured_peak"] = out.measured.overall;
    mem["measured_by_phase"] = out.measured.by_phase;
    write_text(*dir / "memory.json", mem.dump(2) + "\n");
  }
  return out;
}

Json step_record_json(const StepRecord& r) {
  Json j;
  j["step"] = r.step;
  j["task_loss"] = r.task_loss;
  j["aux_loss"] = r.aux_loss;
  j["grad_norm_k1"] = r.grad_norm_k1;
  j["grad_norm_k2"] = r.grad_norm_k2;
  j["drift_bound_increment"] = r.drift_bound_increment;
  j["modeled_peak_bytes"] = r.modeled_peak_bytes;
  j["ntp_loss"] = r.ntp_loss;
  j["interface_drift"] = nullable(r.interface_drift);
  j["measured_peak_bytes"] = r.measured_peak_bytes;
  j["isolation_violations"] = r.isolation_violations;
  j["mean_reward"] = nullable(r.mean_reward);
  return j;
}

std::string drift_tsv(const DriftReport& report) {
  std::ostringstream os;
  os.precision(17);
  auto cell = [&](const std::optional<double>& v) {
    if (v) os << *v;
    else os << "nan";
  };
  os << "layer\tdelta_total\tdelta_attn\tdelta_mlp\n";
  for (const auto& l : report.layers) {
    os << l.layer << '\t';
    cell(l.total);
    os << '\t';
    cell(l.attn);
    os << '\t';
    cell(l.mlp);
    os << '\n';
  }
  return os.str();
}

Json empty_summary(const ExperimentConfig& config) {
  Json j;
  j["name"] = config.name;
  j["method"] = to_string(config.method);
  j["regime"] = to_string(config.regime);
  j["objective"] = to_string(config.loss.kind);
  j["seeds"] = Json::array();
  j["mean"] = Json::object();
  return j;
}

Json summary_json(const ExperimentResult& result) {
  const ExperimentConfig& c = result.config;
  Json j = empty_summary(c);
  const std::size_t split = c.model.resolved_split();
  std::map<std::string, std::vector<double>> pool;
  auto add = [&](Json& row, const std::string& key, const std::optional<double>& v) {
    row[key] = nullable(v);
    if (v) pool[key].push_back(*v);
  };
  for (const auto& s : result.seeds) {
    Json row;
    row["seed"] = s.seed;
    add(row, "final_task_loss", s.steps.empty() ? std::nullopt : std::optional<double>(s.steps.back().task_loss));
    add(row, "drift_k1_mean", s.drift.mean_over(0, split));
    add(row, "drift_k2_mean", s.drift.mean_over(split, c.model.n_layers));
    add(row, "drift_ratio_k2_k1", ratio_k2_over_k1(s.drift, split, c.model.n_layers));
    add(row, "D1", s.drift.d1);
    add(row, "D2", s.drift.d2);
    for (const auto& [k, v] : s.eval_before) add(row, "eval_before/" + k, v);
    for (const auto& [k, v] : s.eval_after) add(row, "eval_after/" + k, v);
    add(row, "reward_before", s.reward_before);
    add(row, "reward_after", s.reward_after);
    add(row, "modeled_peak_bytes", compare_peak_models(s.ledger, c.method == Method::kE2E ? PeakMode::kE2E : PeakMode::kLoPT));
    add(row, "measured_peak_bytes", static_cast<double>(s.measured.overall));
    std::size_t violations = 0;
    for (const auto& r : s.steps) violations += r.isolation_violations;
    row["isolation_violations"] = violations;
    Json table = Json::array();
    for (const auto& l : s.drift.layers)
      table.push_back(Json{{"layer", l.layer}, {"delta_total", nullable(l.total)}, {"delta_attn", nullable(l.attn)},
                           {"delta_mlp", nullable(l.mlp)}});
    row["drift_table"] = table;
    if (c.regime == Regime::kGrpo) {
      // Mean training reward per window of 100 steps.
      Json curve = Json::array();
      double acc = 0.0;
      std::size_t n = 0;
      for (const auto& r : s.steps) {
        acc += r.mean_reward.value_or(0.0);
        if (++n == 100) {
          curve.push_back(acc / 100.0);
          acc = 0.0;
          n = 0;
        }
      }
      if (n) curve.push_back(acc / static_cast<double>(n));
      row["reward_curve"] = curve;
    }
    j["seeds"].push_back(row);
  }
  for (const auto& [k, vs] : pool) {
    double sum = 0.0;
    for (double v : vs) sum += v;
    j["mean"][k] = sum / static_cast<double>(vs.size());
  }
  return j;
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  ExperimentResult result;
  result.config = config;
  result.dir = resolve_output_dir(config);
  std::filesystem::create_directories(result.dir);
  write_text(result.dir / "config.json", to_json(config).dump(2) + "\n");
  std::filesystem::remove(result.dir / "FAILED");
  for (std::uint64_t seed : config.seeds) {
    const auto seed_dir = result.dir / ("seed_" + std::to_string(seed));
    try {
      std::filesystem::create_directories(seed_dir);
      result.seeds.push_back(config.precision == Precision::kFloat32 ? run_seed<float>(config, seed, seed_dir)
                                                                     : run_seed<double>(config, seed, seed_dir));
    } catch (const std::exception& e) {
      write_text(result.dir / "FAILED", "seed " + std::to_string(seed) + ": " + e.what() + "\n");
      Json partial = summary_json(result);
      partial["status"] = "failed";
      write_text(result.dir / "summary.json", partial.dump(2) + "\n");
      throw;
    }
  }
  Json summary = summary_json(result);
  summary["status"] = "ok";
  write_text(result.dir / "summary.json", summary.dump(2) + "\n");
  return result;
}

#define LOPT_INSTANTIATE(Real)                                                                                \
  template double heldout_loss(const Transformer<Real>&, const std::vector<Example>&, std::size_t);           \
  template double sampled_reward(const Transformer<Real>&, const std::vector<Example>&, const GrpoConfig&,    \
                                 std::uint64_t);                                                              \
  template Transformer<Real> pretrain_base(const ExperimentConfig&, Transformer<Real>, std::uint64_t);        \
  template SeedResult run_seed<Real>(const ExperimentConfig&, std::uint64_t,                                  \
                                     const std::optional<std::filesystem::path>&);

LOPT_INSTANTIATE(float)
LOPT_INSTANTIATE(double)

#undef LOPT_INSTANTIATE

}  // namespace lopt
