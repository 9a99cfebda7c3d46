#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lopt/autograd.hpp"

namespace lopt {

template <typename Real>
using Parameter = ag::Parameter<Real>;
template <typename Real>
using Var = ag::Var<Real>;
template <typename Real>
using Tape = ag::Tape<Real>;
template <typename Real>
using GradStore = ag::GradStore<Real>;

/// Name-sorted parameter storage. std::map keeps element addresses stable,
/// which the tape and GradStore rely on.
template <typename Real>
using ParameterMap = std::map<std::string, Parameter<Real>>;

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t max_seq_len = 64;
  bool tie_embeddings = false;
  /// Layer index of the first k2 layer; floor(n_layers / 2) when unset.
  std::optional<std::size_t> split_index;
  /// Number of blocks the stack is cut into: 2 (k1/k2) or 4.
  std::size_t num_partitions = 2;
  double init_std = 0.02;
  /// Mutation switch for isolation tests: with tied embeddings, let the output
  /// head read the embedding tensor itself instead of its own copy.
  bool share_tied_tensor = false;

  void validate() const;
  std::size_t resolved_split() const;
  bool operator==(const ModelConfig&) const = default;
  /// First layer of every block after the first, strictly increasing.
  std::vector<std::size_t> boundaries() const;
  std::size_t head_dim() const { return d_model / n_heads; }
};

/// Which block owns each parameter. blocks[0] is k1 and blocks.back() holds
/// the final layers, the final norm and the output head.
struct Partition {
  std::vector<std::size_t> boundaries;
  std::vector<std::vector<std::string>> blocks;

  std::size_t num_blocks() const { return blocks.size(); }
  const std::vector<std::string>& first() const { return blocks.front(); }
  const std::vector<std::string>& last() const { return blocks.back(); }
  /// Block index of a parameter name, or nullopt if unassigned.
  std::optional<std::size_t> block_of(const std::string& name) const;
};

struct ParamCounts {
  std::size_t k1 = 0;
  std::size_t k2 = 0;
  std::size_t total = 0;
};

/// Token ids for B sequences of length L, row-major.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> ids;

  std::size_t size() const { return batch * seq_len; }
};

/// Embedding output and boundary representation of the first block.
template <typename Real>
struct FirstHalf {
  Var<Real> h0;
  Var<Real> h1;
};

namespace names {
std::string layer_prefix(std::size_t layer);
inline const std::string kEmbed = "embed";
inline const std::string kHead = "head";
inline const std::string kFinalNormGain = "final_norm.gain";
inline const std::string kFinalNormBias = "final_norm.bias";
/// Parameter names of one transformer block, attention group first.
std::vector<std::string> layer_params(std::size_t layer);
std::vector<std::string> layer_attention_params(std::size_t layer);
std::vector<std::string> layer_mlp_params(std::size_t layer);
}  // namespace names

/// Closed-form parameter count of one pre-norm block: 12 d^2 + 9 d.
std::size_t layer_param_count(std::size_t d_model);
/// Closed-form parameter count of a whole model under config.
std::size_t expected_param_count(const ModelConfig& config);

/// Decoder-only pre-norm transformer with rotary attention and a 4x GELU MLP.
template <typename Real>
class Transformer {
 public:
  static Transformer init(const ModelConfig& config, std::uint64_t seed);
  /// Rebuilds a model around existing parameter values (checkpoint loading).
  static Transformer from_params(const ModelConfig& config, ParameterMap<Real> params);

  const ModelConfig& config() const { return config_; }
  const Partition& partition() const { return partition_; }
  ParameterMap<Real>& params() { return params_; }
  const ParameterMap<Real>& params() const { return params_; }
  Parameter<Real>& param(const std::string& name);
  const Parameter<Real>& param(const std::string& name) const;

  /// Parameters of block i of the partition, in name order.
  std::vector<Parameter<Real>*> block_params(std::size_t block);
  std::vector<const Parameter<Real>*> block_params(std::size_t block) const;

  ParamCounts count_params() const;

  Var<Real> embed(Tape<Real>& tape, const TokenBatch& batch) const;
  /// Applies layers [begin, end) to h of shape [B, L, d].
  Var<Real> run_layers(Tape<Real>& tape, Var<Real> h, std::size_t begin, std::size_t end) const;
  /// Final norm and output head: [B, L, d] -> [B, L, vocab].
  Var<Real> output_head(Tape<Real>& tape, Var<Real> h) const;

  FirstHalf<Real> forward_first_half(Tape<Real>& tape, const TokenBatch& batch) const;
  Var<Real> forward_second_half(Tape<Real>& tape, Var<Real> boundary) const;
  /// Full forward without any boundary.
  Var<Real> forward(Tape<Real>& tape, const TokenBatch& batch) const;

  /// Boundary representation computed without recording a graph.
  Tensor<Real> first_half_values(const TokenBatch& batch) const;
  /// Logits computed without recording a graph.
  Tensor<Real> logits(const TokenBatch& batch) const;

  const Parameter<Real>& head_param() const;

 private:
  Transformer(ModelConfig config, ParameterMap<Real> params);
  void check_batch(const TokenBatch& batch) const;
  Var<Real> attention(Tape<Real>& tape, Var<Real> x, std::size_t layer) const;
  Var<Real> mlp(Tape<Real>& tape, Var<Real> x, std::size_t layer) const;
  Var<Real> p(Tape<Real>& tape, const std::string& name) const;

  ModelConfig config_;
  ParameterMap<Real> params_;
  Partition partition_;
};

Partition make_partition(const ModelConfig& config);

}  // namespace lopt
