// Command line front end. Every subcommand exits 0 on success, 1 on a
// failed check and 2 on an error.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "lopt/checkpoint.hpp"
#include "lopt/config.hpp"
#include "lopt/diagnostics.hpp"
#include "lopt/errors.hpp"
#include "lopt/experiment.hpp"
#include "lopt/instrumentation.hpp"

using namespace lopt;

namespace {

/// Flags that mirror config keys. Values given here beat the config file.
struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::string> name, method, objective, precision, output_dir;
  std::optional<double> lambda_aux, lr_local, lr_task;
  std::optional<std::size_t> steps, batch_size;
  std::vector<std::uint64_t> seeds;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "Config file")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "Override any config key, e.g. --set model.d_model=32");
    app->add_option("--name", name);
    app->add_option("--method", method, "e2e | lopt | freeze_k1 | lopt_k4");
    app->add_option("--objective", objective, "recon | ntp | ntp_plus_recon");
    app->add_option("--precision", precision, "float32 | float64");
    app->add_option("--output-dir", output_dir);
    app->add_option("--lambda-aux", lambda_aux);
    app->add_option("--lr-local", lr_local);
    app->add_option("--lr-task", lr_task);
    app->add_option("--steps", steps);
    app->add_option("--batch-size", batch_size);
    app->add_option("--seeds", seeds)->delimiter(',');
  }

  ExperimentConfig resolve(std::optional<Regime> regime = std::nullopt) const {
    Json doc = config_path.empty() ? Json::object() : load_config_document(config_path);
    for (const auto& s : sets) apply_override(doc, s);
    auto put = [&](const char* key, const auto& v) {
      if (v) apply_override(doc, std::string(key) + "=" + Json(*v).dump());
    };
    put("name", name);
    put("method", method);
    put("objective", objective);
    put("precision", precision);
    put("output_dir", output_dir);
    put("lambda_aux", lambda_aux);
    put("opt_local.lr", lr_local);
    put("opt_task.lr", lr_task);
    put("steps", steps);
    put("batch_size", batch_size);
    if (!seeds.empty()) doc["seeds"] = seeds;
    if (regime) doc["regime"] = to_string(*regime);
    return experiment_from_json(doc);
  }
};

Precision checkpoint_precision(const std::filesystem::path& path) {
  const CheckpointFile f = read_checkpoint_file(path, LoadMode::kInference);
  for (const auto& e : f.entries)
    if (e.section == CheckpointSection::kModel) return e.dtype == DType::kF64 ? Precision::kFloat64 : Precision::kFloat32;
  throw FormatError(path.string() + " holds no model tensors");
}

std::string model_echo(const ModelConfig& config) {
  Json j;
  j["model"] = to_json(config);
  return j.dump();
}

void print_drift(const DriftReport& d, std::size_t split, std::size_t n_layers) {
  std::cout << drift_tsv(d);
  auto show = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("nan"); };
  std::cout << "# D1 " << d.d1 << " D2 " << d.d2 << " mean_k1 " << show(d.mean_over(0, split)) << " mean_k2 "
            << show(d.mean_over(split, n_layers)) << "\n";
}

template <typename Real>
int drift_cmd(const std::string& base_path, const std::string& tuned_path) {
  const auto base = load_model<Real>(base_path);
  const auto tuned = load_model<Real>(tuned_path);
  if (!(base.config() == tuned.config())) throw InputError("checkpoints have different model configs");
  print_drift(layer_drift(base.config(), base.params(), tuned.params()), base.config().resolved_split(),
              base.config().n_layers);
  return 0;
}

template <typename Real>
int perturb_cmd(const std::string& in, const std::string& out, std::optional<std::size_t> front, double target,
                std::uint64_t seed) {
  const auto model = load_model<Real>(in);
  const ModelConfig& c = model.config();
  const std::size_t s = front.value_or(c.resolved_split());
  auto params = perturb_front_layers(c, model.params(), s, target, seed);
  Transformer<Real> perturbed = Transformer<Real>::from_params(c, std::move(params));
  save_model_checkpoint(out, perturbed, model_echo(c));
  print_drift(layer_drift(c, model.params(), perturbed.params()), s, c.n_layers);
  return 0;
}

template <typename Real>
int isolate_cmd(const ExperimentConfig& config, bool no_detach, bool share_tied) {
  TrainerOptions o;
  o.method = config.method;
  o.loss = config.loss;
  o.opt_local = config.opt_local;
  o.opt_task = config.opt_task;
  o.detach_boundary = !no_detach;
  ModelConfig mc = config.model;
  mc.share_tied_tensor = share_tied;
  std::size_t violations = 0;
  for (std::uint64_t seed : config.seeds) {
    Trainer<Real> trainer(Transformer<Real>::init(mc, seed), o, seed);
    for (std::size_t step = 0; step < config.steps; ++step) {
      StepReport rep;
      const std::uint64_t data_seed = seed * 1000003ULL + step;
      if (config.regime == Regime::kSft) {
        const auto ex = generate_task_data(config.task, config.batch_size, data_seed);
        const EncodedBatch eb = encode_examples(ex, default_tokenizer());
        rep = trainer.step(make_sft_input(eb.tokens, next_token_supervision<Real>(eb.tokens, Tokenizer::kPad, eb.prompt_lens),
                                          Tokenizer::kPad));
      } else {
        const auto prompts = generate_task_data(config.task, config.grpo.prompts_per_step, data_seed);
        rep = grpo_step(trainer, prompts, config.grpo, data_seed ^ 0x5bd1e995ULL).step;
      }
      for (const auto& n : rep.isolation.task_grad_in_k1)
        std::cout << "seed " << seed << " step " << rep.step << " task gradient in k1: " << n << "\n";
      for (const auto& n : rep.isolation.aux_grad_outside)
        std::cout << "seed " << seed << " step " << rep.step << " local gradient outside block: " << n << "\n";
      violations += rep.isolation.task_grad_in_k1.size() + rep.isolation.aux_grad_outside.size();
    }
  }
  std::cout << "violations " << violations << "\n";
  return violations == 0 ? 0 : 1;
}

template <typename Real>
std::size_t measured_peak(const ExperimentConfig& config, Method method, std::size_t steps) {
  TrainerOptions o;
  o.method = method;
  o.loss = config.loss;
  o.opt_local = config.opt_local;
  o.opt_task = config.opt_task;
  const std::uint64_t seed = config.seeds.front();
  Trainer<Real> trainer(Transformer<Real>::init(config.model, seed), o, seed);
  std::vector<StepReport> reports;
  for (std::size_t step = 0; step < steps; ++step) {
    const auto ex = generate_task_data(config.task, config.batch_size, seed + step);
    const EncodedBatch eb = encode_examples(ex, default_tokenizer());
    reports.push_back(trainer.step(
        make_sft_input(eb.tokens, next_token_supervision<Real>(eb.tokens, Tokenizer::kPad, eb.prompt_lens), Tokenizer::kPad)));
  }
  return measured_high_water(reports).overall;
}

template <typename Real>
int profile_cmd(const ExperimentConfig& config, std::size_t seq, std::size_t steps) {
  FootprintOptions f;
  f.element_bytes = sizeof(Real);
  f.mode = PeakMode::kE2E;
  const MemoryLedger le = model_activation_footprint(config.model, config.batch_size, seq, f);
  f.mode = PeakMode::kLoPT;
  const MemoryLedger l = model_activation_footprint(config.model, config.batch_size, seq, f);
  Json out;
  out["batch"] = config.batch_size;
  out["seq"] = seq;
  out["ledger"] = {{"A1", l.A1}, {"A2", l.A2}, {"Ag", l.Ag}, {"A_boundary", l.A_boundary},
                   {"M_state_e2e", le.M_state}, {"M_state_lopt", l.M_state}, {"M_misc", l.M_misc}};
  const double e2e = compare_peak_models(le, PeakMode::kE2E);
  const double lopt = compare_peak_models(l, PeakMode::kLoPT);
  out["modeled_peak"] = {{"e2e", e2e}, {"lopt", lopt}, {"saving", 1.0 - lopt / e2e}};
  const ComputeLedger c = model_compute(config.model, config.batch_size, seq);
  out["compute"] = {{"C_F1", c.C_F1}, {"C_F2", c.C_F2}, {"C_B1_task", c.C_B1_task}, {"C_B2_task", c.C_B2_task},
                    {"C_B1_aux", c.C_B1_aux}, {"C_g", c.C_g}, {"lopt_minus_e2e", compare_compute(c)}};
  if (steps > 0) {
    // Measured peaks use the config's task, so seq here is only for the model.
    out["measured_peak"] = {{"e2e", measured_peak<Real>(config, Method::kE2E, steps)},
                            {"lopt", measured_peak<Real>(config, Method::kLoPT, steps)}};
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

int report_cmd(const std::filesystem::path& dir) {
  std::ifstream in(dir / "summary.json");
  if (!in) throw InputError("no summary.json in " + dir.string());
  const Json s = Json::parse(in);
  std::cout << "run " << s.value("name", "") << " method " << s.value("method", "") << " regime "
            << s.value("regime", "") << " status " << s.value("status", "unknown") << "\n";
  if (std::filesystem::exists(dir / "FAILED")) std::cout << "FAILED marker present\n";
  for (const auto& row : s["seeds"]) {
    std::cout << "seed " << row["seed"];
    for (const char* k : {"final_task_loss", "drift_ratio_k2_k1", "reward_before", "reward_after", "measured_peak_bytes"})
      if (row.contains(k) && !row[k].is_null()) std::cout << "  " << k << " " << row[k].dump();
    std::cout << "\n";
  }
  for (const auto& [k, v] : s["mean"].items()) std::cout << "mean " << k << " " << v.dump() << "\n";
  return 0;
}

template <typename F>
int dispatch(Precision p, F&& f) {
  return p == Precision::kFloat64 ? f(double{}) : f(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Local-learning post-training toolkit"};
  app.require_subcommand(1);

  ConfigFlags sft_flags, grpo_flags, iso_flags, prof_flags;
  auto* sft = app.add_subcommand("train-sft", "Supervised post-training run");
  sft_flags.attach(sft);
  auto* grpo = app.add_subcommand("train-grpo", "GRPO post-training run");
  grpo_flags.attach(grpo);

  std::string base_path, tuned_path;
  auto* drift = app.add_subcommand("drift", "Layer drift between two checkpoints");
  drift->add_option("base", base_path)->required()->check(CLI::ExistingFile);
  drift->add_option("tuned", tuned_path)->required()->check(CLI::ExistingFile);

  std::string perturb_in, perturb_out;
  std::optional<std::size_t> front;
  double target = 2e-7;
  std::uint64_t perturb_seed = 0;
  auto* perturb = app.add_subcommand("perturb", "Perturb the first layers to a target relative drift");
  perturb->add_option("input", perturb_in)->required()->check(CLI::ExistingFile);
  perturb->add_option("output", perturb_out)->required();
  perturb->add_option("--front", front, "Number of leading layers (default: split index)");
  perturb->add_option("--target", target, "Relative drift per layer");
  perturb->add_option("--seed", perturb_seed);

  bool no_detach = false, share_tied = false;
  auto* iso = app.add_subcommand("isolate-check", "Train from scratch and report gradient isolation violations");
  iso_flags.attach(iso);
  iso->add_flag("--no-detach", no_detach, "Mutation: keep the boundary attached");
  iso->add_flag("--share-tied", share_tied, "Mutation: the head reads the embedding tensor directly");

  std::size_t prof_seq = 0, prof_steps = 2;
  auto* prof = app.add_subcommand("profile", "Modeled memory and compute, plus measured peaks");
  prof_flags.attach(prof);
  prof->add_option("--seq", prof_seq, "Sequence length for the model (default: model.max_seq_len)");
  prof->add_option("--measure-steps", prof_steps, "Training steps per method for measured peaks (0 skips)");

  std::string report_dir;
  auto* report = app.add_subcommand("report", "Summarize a finished run directory");
  report->add_option("run_dir", report_dir)->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*sft || *grpo) {
      const ExperimentConfig config =
          *sft ? sft_flags.resolve(Regime::kSft) : grpo_flags.resolve(Regime::kGrpo);
      const ExperimentResult r = run_experiment(config);
      std::cout << (r.dir / "summary.json").string() << "\n";
      return 0;
    }
    if (*drift)
      return dispatch(checkpoint_precision(base_path),
                      [&](auto r) { return drift_cmd<decltype(r)>(base_path, tuned_path); });
    if (*perturb)
      return dispatch(checkpoint_precision(perturb_in), [&](auto r) {
        return perturb_cmd<decltype(r)>(perturb_in, perturb_out, front, target, perturb_seed);
      });
    if (*iso) {
      const ExperimentConfig config = iso_flags.resolve();
      return dispatch(config.precision,
                      [&](auto r) { return isolate_cmd<decltype(r)>(config, no_detach, share_tied); });
    }
    if (*prof) {
      const ExperimentConfig config = prof_flags.resolve(Regime::kSft);
      const std::size_t seq = prof_seq ? prof_seq : config.model.max_seq_len;
      return dispatch(config.precision, [&](auto r) { return profile_cmd<decltype(r)>(config, seq, prof_steps); });
    }
    if (*report) return report_cmd(report_dir);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
