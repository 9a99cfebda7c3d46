#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "lopt/checkpoint.hpp"
#include "lopt/config.hpp"
#include "lopt/errors.hpp"
#include "lopt/experiment.hpp"

using namespace lopt;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("lopt_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.max_seq_len = 16;
  return c;
}

std::string echo(const ModelConfig& c) {
  Json j;
  j["model"] = to_json(c);
  return j.dump();
}

StepInput<double> batch(std::uint64_t seed) {
  TaskSpec t;
  const auto eb = encode_examples(generate_task_data(t, 4, seed), default_tokenizer());
  return make_sft_input(eb.tokens, next_token_supervision<double>(eb.tokens, Tokenizer::kPad, eb.prompt_lens),
                        Tokenizer::kPad);
}

}  // namespace

TEST(Tokenizer, RoundTripsEveryPrintableSymbol) {
  const Tokenizer& tok = default_tokenizer();
  std::string all;
  for (int id = 3; id < 64; ++id) {
    const std::string one = tok.decode({id});
    ASSERT_EQ(one.size(), 1u) << id;
    EXPECT_EQ(tok.id_of(one[0]), id);
    all += one;
  }
  EXPECT_EQ(tok.decode(tok.encode(all)), all);
  EXPECT_EQ(tok.decode({Tokenizer::kBos, tok.id_of('7'), Tokenizer::kEos, Tokenizer::kPad}), "7");
  EXPECT_THROW(tok.encode("A"), InputError);
  EXPECT_THROW(tok.decode({64}), InputError);
  EXPECT_THROW(tok.decode({-1}), InputError);
}

TEST(Tasks, DeterministicAndSplitDisjoint) {
  for (TaskKind k : {TaskKind::kAddition, TaskKind::kCopy, TaskKind::kTransformCase}) {
    TaskSpec t;
    t.kind = k;
    const auto a = generate_task_data(t, 50, 3), b = generate_task_data(t, 50, 3);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].prompt + "|" + a[i].target, b[i].prompt + "|" + b[i].target);
    std::set<std::string> train;
    for (const auto& e : generate_task_data(t, 300, 4)) train.insert(e.prompt);
    t.split = Split::kHeldOut;
    for (const auto& e : generate_task_data(t, 100, 5)) {
      EXPECT_EQ(train.count(e.prompt), 0u) << e.prompt;
      EXPECT_TRUE(is_heldout(t, e.prompt));
    }
  }
}

TEST(Tasks, AdditionTargetsAreSums) {
  TaskSpec t;
  t.split = Split::kAll;
  for (const auto& e : generate_task_data(t, 100, 6)) {
    long long x = 0, y = 0;
    char plus = 0;
    std::istringstream in(e.prompt);
    in >> x >> plus >> y;
    EXPECT_EQ(e.answer, x + y) << e.prompt;
    EXPECT_EQ(e.target, std::to_string(x + y));
  }
  t.trailing_zero_fraction = 1.0;
  for (const auto& e : generate_task_data(t, 20, 7)) EXPECT_EQ(e.target, std::to_string(e.answer) + "0");
}

TEST(Checkpoint, RoundTripRestoresTrainerExactly) {
  const fs::path dir = scratch("roundtrip");
  TrainerOptions o;
  Trainer<double> a(Transformer<double>::init(tiny(), 1), o, 1);
  a.step(batch(1));
  a.step(batch(2));
  save_checkpoint(dir / "a.lpt", a, echo(tiny()));
  Trainer<double> b(Transformer<double>::init(tiny(), 99), o, 99);
  load_checkpoint(dir / "a.lpt", b);
  EXPECT_EQ(b.steps_taken(), 2u);
  // Continuing from the restored state matches continuing from the original.
  a.step(batch(3));
  b.step(batch(3));
  for (const auto& [n, p] : a.model().params()) EXPECT_TRUE(p.value.identical(b.model().param(n).value)) << n;
  for (const auto& [n, p] : a.aux_heads()[0].params())
    EXPECT_TRUE(p.value.identical(b.aux_heads()[0].params().at(n).value)) << n;
}

TEST(Checkpoint, InferenceLoadGivesSameLogits) {
  const fs::path dir = scratch("inference");
  Trainer<float> tr(Transformer<float>::init(tiny(), 2), TrainerOptions{}, 2);
  save_checkpoint(dir / "t.lpt", tr, echo(tiny()));
  const auto m = load_model<float>(dir / "t.lpt");
  TokenBatch tb{1, 4, {1, 10, 11, 2}};
  EXPECT_TRUE(m.logits(tb).identical(tr.model().logits(tb)));
  const auto f = read_checkpoint_file(dir / "t.lpt", LoadMode::kInference);
  for (const auto& e : f.entries) EXPECT_EQ(e.section, CheckpointSection::kModel) << e.name;
}

TEST(Checkpoint, CorruptFilesAreFormatErrors) {
  const fs::path dir = scratch("corrupt");
  save_model_checkpoint(dir / "m.lpt", Transformer<float>::init(tiny(), 3), echo(tiny()));
  const std::string good = slurp(dir / "m.lpt");
  auto expect_bad = [&](const std::string& bytes, const char* what) {
    spit(dir / "bad.lpt", bytes);
    EXPECT_THROW(read_checkpoint_file(dir / "bad.lpt"), FormatError) << what;
    EXPECT_THROW(load_model<float>(dir / "bad.lpt"), FormatError) << what;
  };
  std::string s = good;
  s[0] = 'X';
  expect_bad(s, "magic");
  s = good;
  s[4] = 9;
  expect_bad(s, "version");
  expect_bad(good.substr(0, good.size() / 2), "truncated");
  expect_bad(good.substr(0, 3), "short header");
  s = good;
  s[good.size() / 2] ^= 0x40;
  expect_bad(s, "checksum");
  EXPECT_THROW(read_checkpoint_file(dir / "missing.lpt"), Error);
}

TEST(Checkpoint, LoadIntoMismatchedTrainerChangesNothing) {
  const fs::path dir = scratch("mismatch");
  Trainer<double> a(Transformer<double>::init(tiny(), 4), TrainerOptions{}, 4);
  save_checkpoint(dir / "a.lpt", a, echo(tiny()));
  ModelConfig other = tiny();
  other.n_layers = 4;
  Trainer<double> b(Transformer<double>::init(other, 5), TrainerOptions{}, 5);
  const auto before = b.model().params();
  EXPECT_THROW(load_checkpoint(dir / "a.lpt", b), Error);
  for (const auto& [n, p] : before) EXPECT_TRUE(p.value.identical(b.model().param(n).value)) << n;
}

TEST(Config, ParsesCommentsOverridesAndRejectsUnknownKeys) {
  const fs::path dir = scratch("config");
  spit(dir / "c.json", R"({
    // comment
    "name": "x", "steps": 5, /* inline */
    "model": { "d_model": 16, "n_heads": 2, "n_layers": 2 },
    "pretrain": { "tasks": [ { "kind": "copy" } ] }
  })");
  Json doc = load_config_document(dir / "c.json");
  apply_override(doc, "model.n_layers=4");
  apply_override(doc, "method=e2e");
  apply_override(doc, "pretrain.tasks.0.kind=addition");
  const auto cfg = experiment_from_json(doc);
  EXPECT_EQ(cfg.steps, 5u);
  EXPECT_EQ(cfg.model.n_layers, 4u);
  EXPECT_EQ(cfg.method, Method::kE2E);
  EXPECT_EQ(cfg.pretrain.tasks.at(0).kind, TaskKind::kAddition);
  // Serialization round-trips.
  EXPECT_EQ(to_json(experiment_from_json(to_json(cfg))).dump(), to_json(cfg).dump());

  Json bad = doc;
  bad["modle"] = Json::object();
  EXPECT_THROW(experiment_from_json(bad), ConfigError);
  bad = doc;
  bad["model"]["d_modle"] = 8;
  EXPECT_THROW(experiment_from_json(bad), ConfigError);
  EXPECT_THROW(apply_override(doc, "novalue"), ConfigError);
  EXPECT_THROW(apply_override(doc, "pretrain.tasks.3.kind=copy"), ConfigError);
  bad = doc;
  bad["lambda_aux"] = 0.0;
  EXPECT_THROW(experiment_from_json(bad).validate(), ConfigError);
}

TEST(Artifacts, DriftTsvAndEmptySummaryLayout) {
  DriftReport r;
  r.layers.push_back({"embed", 0.5, {}, {}});
  r.layers.push_back({"0", 0.25, 0.125, std::nullopt});
  EXPECT_EQ(drift_tsv(r), "layer\tdelta_total\tdelta_attn\tdelta_mlp\nembed\t0.5\tnan\tnan\n0\t0.25\t0.125\tnan\n");
  ExperimentConfig c;
  c.name = "e";
  const Json s = empty_summary(c);
  EXPECT_EQ(s["name"], "e");
  EXPECT_TRUE(s["seeds"].empty());
}

// Same config, same bytes: a rerun reproduces every deterministic artifact.
TEST(Experiment, RerunIsBitIdentical) {
  const fs::path root = scratch("rerun");
  ExperimentConfig c;
  c.model = tiny();
  c.steps = 4;
  c.batch_size = 4;
  c.eval_examples = 8;
  c.seeds = {1, 2};
  c.precision = Precision::kFloat64;
  c.name = "a";
  c.output_dir = (root / "a").string();
  const std::vector<std::string> files{"summary.json", "seed_1/steps.jsonl", "seed_2/steps.jsonl", "seed_1/drift.tsv",
                                       "seed_1/final.lpt", "seed_2/memory.json"};
  run_experiment(c);
  std::vector<std::string> first;
  for (const auto& f : files) first.push_back(slurp(root / "a" / f));
  run_experiment(c);
  for (std::size_t i = 0; i < files.size(); ++i) {
    EXPECT_FALSE(first[i].empty()) << files[i];
    EXPECT_TRUE(first[i] == slurp(root / "a" / files[i])) << files[i];
  }
  EXPECT_EQ(Json::parse(first[0])["status"], "ok");
  // One line per step, each a JSON object with the fixed leading fields.
  std::istringstream lines(slurp(root / "a/seed_1/steps.jsonl"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const Json j = Json::parse(line);
    EXPECT_EQ(j.begin().key(), "step");
    EXPECT_TRUE(j.contains("modeled_peak_bytes"));
    EXPECT_FALSE(j.contains("wall_ms"));
    ++n;
  }
  EXPECT_EQ(n, 4u);
}

TEST(Experiment, ThreeSeedsGiveThreeCheckpointsAndSeedMeans) {
  const fs::path root = scratch("seeds");
  ExperimentConfig c;
  c.model = tiny();
  c.steps = 2;
  c.batch_size = 4;
  c.eval_examples = 8;
  c.seeds = {4, 5, 6};
  c.output_dir = (root / "run").string();
  const auto result = run_experiment(c);
  ASSERT_EQ(result.seeds.size(), 3u);
  for (auto s : c.seeds) EXPECT_TRUE(fs::exists(root / "run" / ("seed_" + std::to_string(s)) / "final.lpt")) << s;
  const Json summary = Json::parse(slurp(root / "run/summary.json"));
  double mean = 0.0;
  for (const auto& row : summary["seeds"]) mean += row["final_task_loss"].get<double>() / 3.0;
  EXPECT_NEAR(summary["mean"]["final_task_loss"].get<double>(), mean, 1e-12);
}
