#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lopt/model.hpp"
#include "lopt/tokenizer.hpp"

namespace lopt {

enum class TaskKind { kCopy, kAddition, kTransformCase };
enum class Split { kTrain, kHeldOut, kAll };

const char* to_string(TaskKind k);
TaskKind parse_task_kind(const std::string& text);
const char* to_string(Split s);
Split parse_split(const std::string& text);

struct TaskSpec {
  TaskKind kind = TaskKind::kAddition;
  /// Inclusive operand range for addition.
  long long operand_min = 0;
  long long operand_max = 99;
  /// Letter-string length range for copy and transform_case.
  std::size_t min_len = 1;
  std::size_t max_len = 6;
  /// Salts the prompt hash that decides train versus held-out membership.
  std::uint64_t corpus_seed = 0;
  double heldout_fraction = 0.2;
  Split split = Split::kTrain;
  /// Share of addition targets with a stray '0' glued to the sum ("7" -> "70").
  /// Such a target never scores under exact match, yet its digits are the
  /// same computation as the clean one. Used to build a format-broken warm
  /// start for GRPO.
  double trailing_zero_fraction = 0.0;

  void validate() const;
};

struct Example {
  std::string prompt;
  std::string target;
  /// Ground truth for numeric tasks.
  long long answer = 0;
};

/// True when the prompt belongs to the held-out side of spec's split.
bool is_heldout(const TaskSpec& spec, const std::string& prompt);

/// n examples drawn with replacement from spec's split; deterministic in seed.
std::vector<Example> generate_task_data(const TaskSpec& spec, std::size_t n, std::uint64_t seed);

struct EncodedBatch {
  TokenBatch tokens;
  std::vector<std::size_t> prompt_lens;  // bos plus prompt characters
};

/// Rows are bos + prompt + target + eos, right-padded to seq_len (or to the
/// longest row when seq_len is 0).
EncodedBatch encode_examples(const std::vector<Example>& examples, const Tokenizer& tok, std::size_t seq_len = 0);

/// B examples drawn uniformly with replacement.
std::vector<Example> sample_examples(const std::vector<Example>& pool, std::size_t count, std::mt19937_64& rng);

/// FNV-1a 64-bit hash.
std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace lopt
