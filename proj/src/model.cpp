#include "lopt/model.hpp"

#include <cmath>
#include <random>

namespace lopt {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model: " + msg); };
  if (vocab_size < 2) fail("vocab_size must be at least 2");
  if (d_model == 0 || d_model % 4 != 0) fail("d_model must be a positive multiple of 4");
  if (n_heads == 0 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) fail("head dimension must be even for rotary encoding");
  if (n_layers < 2) fail("n_layers must be at least 2");
  if (max_seq_len == 0) fail("max_seq_len must be positive");
  if (!(init_std > 0.0)) fail("init_std must be positive");
  if (num_partitions != 2 && num_partitions != 4) fail("num_partitions must be 2 or 4");
  if (num_partitions == 4 && n_layers < 4) fail("four partitions need at least 4 layers");
  if (split_index && (*split_index < 1 || *split_index > n_layers - 1))
    fail("split_index must lie in [1, n_layers - 1]");
  if (share_tied_tensor && !tie_embeddings) fail("share_tied_tensor requires tie_embeddings");
}

std::size_t ModelConfig::resolved_split() const { return split_index.value_or(n_layers / 2); }

std::vector<std::size_t> ModelConfig::boundaries() const {
  if (num_partitions == 2) return {resolved_split()};
  std::vector<std::size_t> out;
  for (std::size_t i = 1; i < num_partitions; ++i)
    out.push_back(static_cast<std::size_t>(std::lround(static_cast<double>(i * n_layers) / num_partitions)));
  return out;
}

std::optional<std::size_t> Partition::block_of(const std::string& name) const {
  for (std::size_t b = 0; b < blocks.size(); ++b)
    if (std::find(blocks[b].begin(), blocks[b].end(), name) != blocks[b].end()) return b;
  return std::nullopt;
}

namespace names {

std::string layer_prefix(std::size_t layer) { return "layers." + std::to_string(layer) + "."; }

std::vector<std::string> layer_attention_params(std::size_t layer) {
  const std::string p = layer_prefix(layer);
  return {p + "ln1.gain", p + "ln1.bias", p + "attn.wq", p + "attn.wk", p + "attn.wv", p + "attn.wo"};
}

std::vector<std::string> layer_mlp_params(std::size_t layer) {
  const std::string p = layer_prefix(layer);
  return {p + "ln2.gain", p + "ln2.bias", p + "mlp.w1", p + "mlp.b1", p + "mlp.w2", p + "mlp.b2"};
}

std::vector<std::string> layer_params(std::size_t layer) {
  auto out = layer_attention_params(layer);
  auto mlp = layer_mlp_params(layer);
  out.insert(out.end(), mlp.begin(), mlp.end());
  return out;
}

}  // namespace names

std::size_t layer_param_count(std::size_t d) { return 12 * d * d + 9 * d; }

std::size_t expected_param_count(const ModelConfig& c) {
  const std::size_t head = c.share_tied_tensor ? 0 : c.vocab_size * c.d_model;
  return c.vocab_size * c.d_model + c.n_layers * layer_param_count(c.d_model) + 2 * c.d_model + head;
}

Partition make_partition(const ModelConfig& config) {
  Partition part;
  part.boundaries = config.boundaries();
  part.blocks.resize(part.boundaries.size() + 1);
  part.blocks.front().push_back(names::kEmbed);
  std::size_t block = 0;
  for (std::size_t layer = 0; layer < config.n_layers; ++layer) {
    while (block < part.boundaries.size() && layer >= part.boundaries[block]) ++block;
    for (auto& n : names::layer_params(layer)) part.blocks[block].push_back(std::move(n));
  }
  auto& last = part.blocks.back();
  last.push_back(names::kFinalNormGain);
  last.push_back(names::kFinalNormBias);
  if (!config.share_tied_tensor) last.push_back(names::kHead);
  for (auto& b : part.blocks) std::sort(b.begin(), b.end());
  return part;
}

template <typename Real>
Transformer<Real>::Transformer(ModelConfig config, ParameterMap<Real> params)
    : config_(std::move(config)), params_(std::move(params)), partition_(make_partition(config_)) {
  for (const auto& block : partition_.blocks)
    for (const auto& name : block)
      if (!params_.count(name)) throw ConfigError("model is missing parameter " + name);
  std::size_t assigned = 0;
  for (const auto& block : partition_.blocks) assigned += block.size();
  if (assigned != params_.size()) throw ConfigError("model has parameters outside the partition");
  if (count_params().total != expected_param_count(config_))
    throw ConfigError("parameter count does not match the configuration");
}

template <typename Real>
Transformer<Real> Transformer<Real>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, config.init_std);
  const std::size_t d = config.d_model, V = config.vocab_size;
  ParameterMap<Real> params;
  auto add = [&](const std::string& name, Shape shape, const char* kind) {
    Tensor<Real> t(std::move(shape));
    if (std::string(kind) == "normal")
      for (Real& v : t.values()) v = static_cast<Real>(normal(rng));
    else if (std::string(kind) == "one")
      t.fill(Real(1));
    params.emplace(name, Parameter<Real>{name, std::move(t)});
  };
  // Creation order fixes the random stream, so keep it stable.
  add(names::kEmbed, {V, d}, "normal");
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = names::layer_prefix(l);
    add(p + "ln1.gain", {d}, "one");
    add(p + "ln1.bias", {d}, "zero");
    add(p + "attn.wq", {d, d}, "normal");
    add(p + "attn.wk", {d, d}, "normal");
    add(p + "attn.wv", {d, d}, "normal");
    add(p + "attn.wo", {d, d}, "normal");
    add(p + "ln2.gain", {d}, "one");
    add(p + "ln2.bias", {d}, "zero");
    add(p + "mlp.w1", {4 * d, d}, "normal");
    add(p + "mlp.b1", {4 * d}, "zero");
    add(p + "mlp.w2", {d, 4 * d}, "normal");
    add(p + "mlp.b2", {d}, "zero");
  }
  add(names::kFinalNormGain, {d}, "one");
  add(names::kFinalNormBias, {d}, "zero");
  if (config.tie_embeddings) {
    if (!config.share_tied_tensor) {
      // Separate role tensor for the head, starting equal to the embedding.
      params.emplace(names::kHead, Parameter<Real>{names::kHead, params.at(names::kEmbed).value});
    }
  } else {
    add(names::kHead, {V, d}, "normal");
  }
  return Transformer(config, std::move(params));
}

template <typename Real>
Transformer<Real> Transformer<Real>::from_params(const ModelConfig& config, ParameterMap<Real> params) {
  config.validate();
  for (auto& [name, p] : params) p.name = name;
  return Transformer(config, std::move(params));
}

template <typename Real>
Parameter<Real>& Transformer<Real>::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("no parameter named " + name);
  return it->second;
}

template <typename Real>
const Parameter<Real>& Transformer<Real>::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("no parameter named " + name);
  return it->second;
}

template <typename Real>
std::vector<Parameter<Real>*> Transformer<Real>::block_params(std::size_t block) {
  std::vector<Parameter<Real>*> out;
  for (const auto& name : partition_.blocks.at(block)) out.push_back(&param(name));
  return out;
}

template <typename Real>
std::vector<const Parameter<Real>*> Transformer<Real>::block_params(std::size_t block) const {
  std::vector<const Parameter<Real>*> out;
  for (const auto& name : partition_.blocks.at(block)) out.push_back(&param(name));
  return out;
}

template <typename Real>
ParamCounts Transformer<Real>::count_params() const {
  ParamCounts c;
  for (std::size_t b = 0; b < partition_.num_blocks(); ++b) {
    std::size_t n = 0;
    for (const auto& name : partition_.blocks[b]) n += param(name).value.size();
    (b == 0 ? c.k1 : c.k2) += n;
    c.total += n;
  }
  return c;
}

template <typename Real>
const Parameter<Real>& Transformer<Real>::head_param() const {
  return param(config_.share_tied_tensor ? names::kEmbed : names::kHead);
}

template <typename Real>
Var<Real> Transformer<Real>::p(Tape<Real>& tape, const std::string& name) const {
  return tape.param(param(name));
}

template <typename Real>
void Transformer<Real>::check_batch(const TokenBatch& batch) const {
  if (batch.batch == 0 || batch.seq_len == 0) throw InputError("empty token batch");
  if (batch.ids.size() != batch.size()) throw InputError("token batch ids do not match batch x seq_len");
  if (batch.seq_len > config_.max_seq_len)
    throw InputError("sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  for (int id : batch.ids)
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
      throw InputError("token id " + std::to_string(id) + " outside vocabulary");
}

template <typename Real>
Var<Real> Transformer<Real>::embed(Tape<Real>& tape, const TokenBatch& batch) const {
  check_batch(batch);
  return ag::embed_lookup(p(tape, names::kEmbed), std::span<const int>(batch.ids), Shape{batch.batch, batch.seq_len});
}

template <typename Real>
Var<Real> Transformer<Real>::attention(Tape<Real>& tape, Var<Real> x, std::size_t layer) const {
  const std::string pre = names::layer_prefix(layer) + "attn.";
  const std::size_t H = config_.n_heads, hd = config_.head_dim();
  Var<Real> q = ag::matmul(x, p(tape, pre + "wq"), true);
  Var<Real> k = ag::matmul(x, p(tape, pre + "wk"), true);
  Var<Real> v = ag::matmul(x, p(tape, pre + "wv"), true);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Var<Real>> heads;
  heads.reserve(H);
  for (std::size_t h = 0; h < H; ++h) {
    Var<Real> qh = ag::rope(ag::slice(q, h * hd, hd));
    Var<Real> kh = ag::rope(ag::slice(k, h * hd, hd));
    Var<Real> vh = ag::slice(v, h * hd, hd);
    Var<Real> scores = ag::causal_mask(ag::scale(ag::matmul(qh, kh, true), inv_sqrt));
    heads.push_back(ag::matmul(ag::softmax(scores), vh));
  }
  Var<Real> merged = ag::concat(std::span<const Var<Real>>(heads));
  return ag::matmul(merged, p(tape, pre + "wo"), true);
}

template <typename Real>
Var<Real> Transformer<Real>::mlp(Tape<Real>& tape, Var<Real> x, std::size_t layer) const {
  const std::string pre = names::layer_prefix(layer) + "mlp.";
  Var<Real> hidden = ag::gelu(ag::add(ag::matmul(x, p(tape, pre + "w1"), true), p(tape, pre + "b1")));
  return ag::add(ag::matmul(hidden, p(tape, pre + "w2"), true), p(tape, pre + "b2"));
}

template <typename Real>
Var<Real> Transformer<Real>::run_layers(Tape<Real>& tape, Var<Real> h, std::size_t begin, std::size_t end) const {
  const Shape& s = h.shape();
  if (s.size() != 3 || s[2] != config_.d_model)
    throw ShapeError("hidden state must be [B, L, " + std::to_string(config_.d_model) + "], got " + shape_string(s));
  if (s[1] > config_.max_seq_len) throw ShapeError("hidden state longer than max_seq_len");
  if (begin > end || end > config_.n_layers) throw ContractError("layer range out of bounds");
  for (std::size_t l = begin; l < end; ++l) {
    const std::string pre = names::layer_prefix(l);
    Var<Real> a = ag::layernorm(h, p(tape, pre + "ln1.gain"), p(tape, pre + "ln1.bias"));
    h = ag::add(h, attention(tape, a, l));
    Var<Real> m = ag::layernorm(h, p(tape, pre + "ln2.gain"), p(tape, pre + "ln2.bias"));
    h = ag::add(h, mlp(tape, m, l));
  }
  return h;
}

template <typename Real>
Var<Real> Transformer<Real>::output_head(Tape<Real>& tape, Var<Real> h) const {
  Var<Real> normed = ag::layernorm(h, p(tape, names::kFinalNormGain), p(tape, names::kFinalNormBias));
  return ag::matmul(normed, tape.param(head_param()), true);
}

template <typename Real>
FirstHalf<Real> Transformer<Real>::forward_first_half(Tape<Real>& tape, const TokenBatch& batch) const {
  Var<Real> h0 = embed(tape, batch);
  return {h0, run_layers(tape, h0, 0, config_.resolved_split())};
}

template <typename Real>
Var<Real> Transformer<Real>::forward_second_half(Tape<Real>& tape, Var<Real> boundary) const {
  return output_head(tape, run_layers(tape, boundary, config_.resolved_split(), config_.n_layers));
}

template <typename Real>
Var<Real> Transformer<Real>::forward(Tape<Real>& tape, const TokenBatch& batch) const {
  return output_head(tape, run_layers(tape, embed(tape, batch), 0, config_.n_layers));
}

template <typename Real>
Tensor<Real> Transformer<Real>::first_half_values(const TokenBatch& batch) const {
  Tape<Real> tape(false);
  return forward_first_half(tape, batch).h1.value();
}

template <typename Real>
Tensor<Real> Transformer<Real>::logits(const TokenBatch& batch) const {
  Tape<Real> tape(false);
  return forward(tape, batch).value();
}

template class Transformer<float>;
template class Transformer<double>;

}  // namespace lopt
