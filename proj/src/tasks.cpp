#include "lopt/tasks.hpp"

#include <cmath>

namespace lopt {

const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kCopy:
      return "copy";
    case TaskKind::kAddition:
      return "addition";
    case TaskKind::kTransformCase:
      return "transform_case";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& text) {
  if (text == "copy") return TaskKind::kCopy;
  if (text == "addition") return TaskKind::kAddition;
  if (text == "transform_case") return TaskKind::kTransformCase;
  throw ConfigError("unknown task kind '" + text + "'");
}

const char* to_string(Split s) {
  switch (s) {
    case Split::kTrain:
      return "train";
    case Split::kHeldOut:
      return "heldout";
    case Split::kAll:
      return "all";
  }
  return "?";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "heldout") return Split::kHeldOut;
  if (text == "all") return Split::kAll;
  throw ConfigError("unknown split '" + text + "'");
}

void TaskSpec::validate() const {
  if (operand_min < 0 || operand_max < operand_min) throw ConfigError("task operand range is empty or negative");
  if (operand_max > 1'000'000'000LL) throw ConfigError("task operands too large");
  if (min_len == 0 || max_len < min_len) throw ConfigError("task length range is invalid");
  if (!(heldout_fraction >= 0.0 && heldout_fraction <= 1.0)) throw ConfigError("heldout_fraction must lie in [0, 1]");
  if (!(trailing_zero_fraction >= 0.0 && trailing_zero_fraction <= 1.0)) throw ConfigError("trailing_zero_fraction must lie in [0, 1]");
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
  std::uint64_t h = seed;
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

bool is_heldout(const TaskSpec& spec, const std::string& prompt) {
  std::uint64_t h = fnv1a64(&spec.corpus_seed, sizeof spec.corpus_seed);
  h = fnv1a64(prompt.data(), prompt.size(), h);
  return static_cast<double>(h % 1'000'000ULL) < spec.heldout_fraction * 1e6;
}

namespace {

std::string random_letters(std::mt19937_64& rng, std::size_t min_len, std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<int> letter(0, 25);
  std::string s(len(rng), 'a');
  for (char& c : s) c = static_cast<char>('a' + letter(rng));
  return s;
}

Example draw(const TaskSpec& spec, std::mt19937_64& rng) {
  Example ex;
  switch (spec.kind) {
    case TaskKind::kAddition: {
      std::uniform_int_distribution<long long> operand(spec.operand_min, spec.operand_max);
      const long long a = operand(rng), b = operand(rng);
      ex.prompt = std::to_string(a) + "+" + std::to_string(b) + "=";
      ex.answer = a + b;
      ex.target = std::to_string(ex.answer);
      if (spec.trailing_zero_fraction > 0.0 &&
          std::uniform_real_distribution<double>(0.0, 1.0)(rng) < spec.trailing_zero_fraction)
        ex.target += '0';
      break;
    }
    case TaskKind::kCopy: {
      const std::string s = random_letters(rng, spec.min_len, spec.max_len);
      ex.prompt = s + "|";
      ex.target = s;
      break;
    }
    case TaskKind::kTransformCase: {
      const std::string s = random_letters(rng, spec.min_len, spec.max_len);
      ex.prompt = s + ">";
      ex.target = s;
      for (char& c : ex.target) c = c == 'z' ? 'a' : static_cast<char>(c + 1);
      break;
    }
  }
  return ex;
}

}  // namespace

std::vector<Example> generate_task_data(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::vector<Example> out;
  out.reserve(n);
  const std::size_t max_attempts = 1000 * n + 1000;
  for (std::size_t attempt = 0; out.size() < n; ++attempt) {
    if (attempt == max_attempts) throw ConfigError("task split is too small to draw from");
    Example ex = draw(spec, rng);
    if (spec.split != Split::kAll && is_heldout(spec, ex.prompt) != (spec.split == Split::kHeldOut)) continue;
    out.push_back(std::move(ex));
  }
  return out;
}

EncodedBatch encode_examples(const std::vector<Example>& examples, const Tokenizer& tok, std::size_t seq_len) {
  if (examples.empty()) throw InputError("cannot encode an empty example list");
  std::vector<std::vector<int>> rows;
  EncodedBatch out;
  std::size_t longest = 0;
  for (const auto& ex : examples) {
    std::vector<int> row{Tokenizer::kBos};
    for (int id : tok.encode(ex.prompt)) row.push_back(id);
    out.prompt_lens.push_back(row.size());
    for (int id : tok.encode(ex.target)) row.push_back(id);
    row.push_back(Tokenizer::kEos);
    longest = std::max(longest, row.size());
    rows.push_back(std::move(row));
  }
  if (seq_len == 0) seq_len = longest;
  if (longest > seq_len) throw InputError("example longer than sequence length " + std::to_string(seq_len));
  out.tokens.batch = rows.size();
  out.tokens.seq_len = seq_len;
  out.tokens.ids.assign(rows.size() * seq_len, Tokenizer::kPad);
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), out.tokens.ids.begin() + r * seq_len);
  return out;
}

std::vector<Example> sample_examples(const std::vector<Example>& pool, std::size_t count, std::mt19937_64& rng) {
  if (pool.empty()) throw InputError("cannot sample from an empty pool");
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<Example> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(pool[pick(rng)]);
  return out;
}

}  // namespace lopt
