#include "lopt/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "lopt/errors.hpp"

namespace lopt {

const char* to_string(Regime r) { return r == Regime::kSft ? "sft" : "grpo"; }

Regime parse_regime(const std::string& text) {
  if (text == "sft") return Regime::kSft;
  if (text == "grpo") return Regime::kGrpo;
  throw ConfigError("unknown regime '" + text + "' (expected sft or grpo)");
}

const char* to_string(Precision p) { return p == Precision::kFloat32 ? "float32" : "float64"; }

Precision parse_precision(const std::string& text) {
  if (text == "float32" || text == "f32") return Precision::kFloat32;
  if (text == "float64" || text == "f64") return Precision::kFloat64;
  throw ConfigError("unknown precision '" + text + "' (expected float32 or float64)");
}

namespace {

/// Reads fields of one JSON object and rejects keys nobody asked for.
class Reader {
 public:
  Reader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <typename T>
  void get(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    T v{};
    get(key, v);
    out = v;
  }

  template <typename Enum, typename Parse>
  void get_enum(const char* key, Enum& out, Parse parse) {
    std::string text;
    get(key, text);
    if (j_.contains(key)) out = parse(text);
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string where(const char* key) const { return where_ + "." + key; }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

OptimizerConfig optimizer_from_json(const Json& j, const std::string& where, OptimizerConfig o = {}) {
  Reader r(j, where);
  r.get_enum("kind", o.kind, parse_optimizer_kind);
  r.get("lr", o.lr);
  r.get("beta1", o.beta1);
  r.get("beta2", o.beta2);
  r.get("eps", o.eps);
  r.get("weight_decay", o.weight_decay);
  r.get("max_grad_norm", o.max_grad_norm);
  return o;
}

GrpoConfig grpo_from_json(const Json& j) {
  GrpoConfig g;
  Reader r(j, "grpo");
  r.get("group_size", g.group_size);
  r.get("prompts_per_step", g.prompts_per_step);
  r.get("clip_eps", g.clip_eps);
  r.get("temperature", g.temperature);
  r.get("top_p", g.top_p);
  r.get("max_new_tokens", g.max_new_tokens);
  r.get("std_eps", g.std_eps);
  r.get("per_sample_backward", g.per_sample_backward);
  return g;
}

TaskSpec task_from_json(const Json& j, const std::string& where) {
  TaskSpec t;
  Reader r(j, where);
  r.get_enum("kind", t.kind, parse_task_kind);
  r.get("operand_min", t.operand_min);
  r.get("operand_max", t.operand_max);
  r.get("min_len", t.min_len);
  r.get("max_len", t.max_len);
  r.get("corpus_seed", t.corpus_seed);
  r.get("heldout_fraction", t.heldout_fraction);
  r.get_enum("split", t.split, parse_split);
  r.get("trailing_zero_fraction", t.trailing_zero_fraction);
  return t;
}

std::vector<TaskSpec> task_list_from_json(const Json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + ": expected an array of tasks");
  std::vector<TaskSpec> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(task_from_json(j[i], where + "[" + std::to_string(i) + "]"));
  return out;
}

Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

}  // namespace

Json to_json(const ModelConfig& c) {
  Json j;
  j["vocab_size"] = c.vocab_size;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["max_seq_len"] = c.max_seq_len;
  j["tie_embeddings"] = c.tie_embeddings;
  j["split_index"] = c.split_index ? Json(*c.split_index) : Json(nullptr);
  j["num_partitions"] = c.num_partitions;
  j["init_std"] = c.init_std;
  j["share_tied_tensor"] = c.share_tied_tensor;
  return j;
}

Json to_json(const TaskSpec& t) {
  Json j;
  j["kind"] = to_string(t.kind);
  j["operand_min"] = t.operand_min;
  j["operand_max"] = t.operand_max;
  j["min_len"] = t.min_len;
  j["max_len"] = t.max_len;
  j["corpus_seed"] = t.corpus_seed;
  j["heldout_fraction"] = t.heldout_fraction;
  j["split"] = to_string(t.split);
  j["trailing_zero_fraction"] = t.trailing_zero_fraction;
  return j;
}

Json to_json(const OptimizerConfig& o) {
  Json j;
  j["kind"] = to_string(o.kind);
  j["lr"] = o.lr;
  j["beta1"] = o.beta1;
  j["beta2"] = o.beta2;
  j["eps"] = o.eps;
  j["weight_decay"] = o.weight_decay;
  j["max_grad_norm"] = optional_json(o.max_grad_norm);
  return j;
}

Json to_json(const GrpoConfig& g) {
  Json j;
  j["group_size"] = g.group_size;
  j["prompts_per_step"] = g.prompts_per_step;
  j["clip_eps"] = g.clip_eps;
  j["temperature"] = g.temperature;
  j["top_p"] = g.top_p;
  j["max_new_tokens"] = g.max_new_tokens;
  j["std_eps"] = g.std_eps;
  j["per_sample_backward"] = g.per_sample_backward;
  return j;
}

Json to_json(const ExperimentConfig& e) {
  Json j;
  j["name"] = e.name;
  j["model"] = to_json(e.model);
  j["method"] = to_string(e.method);
  j["objective"] = to_string(e.loss.kind);
  j["lambda_aux"] = e.loss.lambda_aux;
  j["ntp_weight"] = e.loss.ntp_weight;
  j["regime"] = to_string(e.regime);
  j["task"] = to_json(e.task);
  j["eval_tasks"] = Json::array();
  for (const auto& t : e.eval_tasks) j["eval_tasks"].push_back(to_json(t));
  j["eval_examples"] = e.eval_examples;
  j["seeds"] = e.seeds;
  j["steps"] = e.steps;
  j["batch_size"] = e.batch_size;
  j["opt_local"] = to_json(e.opt_local);
  j["opt_task"] = to_json(e.opt_task);
  j["grpo"] = to_json(e.grpo);
  Json p;
  p["tasks"] = Json::array();
  for (const auto& t : e.pretrain.tasks) p["tasks"].push_back(to_json(t));
  p["steps"] = e.pretrain.steps;
  p["batch_size"] = e.pretrain.batch_size;
  p["opt"] = to_json(e.pretrain.opt);
  j["pretrain"] = p;
  j["precision"] = to_string(e.precision);
  j["measure_interface_drift"] = e.measure_interface_drift;
  j["output_dir"] = e.output_dir;
  return j;
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  Reader r(j, "model");
  r.get("vocab_size", c.vocab_size);
  r.get("d_model", c.d_model);
  r.get("n_layers", c.n_layers);
  r.get("n_heads", c.n_heads);
  r.get("max_seq_len", c.max_seq_len);
  r.get("tie_embeddings", c.tie_embeddings);
  r.get("split_index", c.split_index);
  r.get("num_partitions", c.num_partitions);
  r.get("init_std", c.init_std);
  r.get("share_tied_tensor", c.share_tied_tensor);
  return c;
}

TaskSpec task_spec_from_json(const Json& j) { return task_from_json(j, "task"); }

ExperimentConfig experiment_from_json(const Json& j) {
  ExperimentConfig e;
  {
    Reader r(j, "config");
    r.get("name", e.name);
    if (const Json* m = r.child("model")) e.model = model_config_from_json(*m);
    r.get_enum("method", e.method, parse_method);
    r.get_enum("objective", e.loss.kind, parse_local_objective);
    r.get("lambda_aux", e.loss.lambda_aux);
    r.get("ntp_weight", e.loss.ntp_weight);
    r.get_enum("regime", e.regime, parse_regime);
    if (const Json* t = r.child("task")) e.task = task_from_json(*t, "task");
    if (const Json* t = r.child("eval_tasks")) e.eval_tasks = task_list_from_json(*t, "eval_tasks");
    r.get("eval_examples", e.eval_examples);
    r.get("seeds", e.seeds);
    r.get("steps", e.steps);
    r.get("batch_size", e.batch_size);
    if (const Json* o = r.child("opt_local")) e.opt_local = optimizer_from_json(*o, "opt_local");
    if (const Json* o = r.child("opt_task")) e.opt_task = optimizer_from_json(*o, "opt_task");
    if (const Json* g = r.child("grpo")) e.grpo = grpo_from_json(*g);
    if (const Json* p = r.child("pretrain")) {
      Reader pr(*p, "pretrain");
      if (const Json* t = pr.child("tasks")) e.pretrain.tasks = task_list_from_json(*t, "pretrain.tasks");
      pr.get("steps", e.pretrain.steps);
      pr.get("batch_size", e.pretrain.batch_size);
      if (const Json* o = pr.child("opt")) e.pretrain.opt = optimizer_from_json(*o, "pretrain.opt");
    }
    r.get_enum("precision", e.precision, parse_precision);
    r.get("measure_interface_drift", e.measure_interface_drift);
    r.get("output_dir", e.output_dir);
  }
  e.validate();
  return e;
}

void ExperimentConfig::validate() const {
  model.validate();
  loss.validate();
  task.validate();
  for (const auto& t : eval_tasks) t.validate();
  for (const auto& t : pretrain.tasks) t.validate();
  opt_local.validate();
  opt_task.validate();
  pretrain.opt.validate();
  grpo.validate();
  if (seeds.empty()) throw ConfigError("seed list must not be empty");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (pretrain.steps > 0 && pretrain.tasks.empty()) throw ConfigError("pretrain.steps > 0 needs pretrain.tasks");
  if (pretrain.steps > 0 && pretrain.batch_size == 0) throw ConfigError("pretrain.batch_size must be positive");
  if (model.num_partitions == 4 && method != Method::kLoPTK4)
    throw ConfigError("model.num_partitions 4 is only used by method lopt_k4");
  if (method == Method::kLoPTK4 && model.num_partitions != 4)
    throw ConfigError("method lopt_k4 needs model.num_partitions 4");
  if (regime == Regime::kGrpo && task.kind != TaskKind::kAddition)
    throw ConfigError("grpo regime needs a numeric (addition) task");
  const auto root = resolve_output_dir(*this);
  std::error_code ec;
  for (auto p = root; !p.empty(); p = p.parent_path()) {
    if (std::filesystem::exists(p, ec)) {
      if (!std::filesystem::is_directory(p, ec)) throw ConfigError("output path component is not a directory: " + p.string());
      break;
    }
    if (p == p.parent_path()) break;
  }
}

Json load_config_document(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    Json doc = Json::parse(in, nullptr, true, true);
    if (!doc.is_object()) throw ConfigError(path.string() + ": top level must be an object");
    return doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return experiment_from_json(load_config_document(path));
}

void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  Json* node = &doc;
  std::stringstream ss(path);
  std::string key;
  std::vector<std::string> keys;
  while (std::getline(ss, key, '.')) keys.push_back(key);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (keys[i].empty()) throw ConfigError("empty key in override " + assignment);
    if (node->is_array()) {
      // Numeric segments index into existing arrays, e.g. pretrain.tasks.0.kind.
      std::size_t idx = 0;
      const auto [end, ec] = std::from_chars(keys[i].data(), keys[i].data() + keys[i].size(), idx);
      if (ec != std::errc() || end != keys[i].data() + keys[i].size() || idx >= node->size())
        throw ConfigError("bad array index '" + keys[i] + "' in override " + path);
      node = &(*node)[idx];
      continue;
    }
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("override path runs through a non-object: " + path);
      *node = Json::object();
    }
    node = &(*node)[keys[i]];
  }
  *node = std::move(value);
}

std::filesystem::path default_output_root() {
  const char* env = std::getenv("LOPT_OUTPUT_ROOT");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

std::filesystem::path resolve_output_dir(const ExperimentConfig& config) {
  std::filesystem::path dir(config.output_dir.empty() ? config.name : config.output_dir);
  if (dir.is_relative()) dir = default_output_root() / dir;
  return std::filesystem::absolute(dir).lexically_normal();
}

}  // namespace lopt
