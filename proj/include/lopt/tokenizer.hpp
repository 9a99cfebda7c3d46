#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

namespace lopt {

/// Fixed 64-symbol character vocabulary: pad, bos, eos, digits, lowercase
/// letters and 25 punctuation symbols (including space).
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr std::size_t kVocabSize = 64;

  Tokenizer();

  /// Throws InputError on characters outside the alphabet.
  std::vector<int> encode(std::string_view text) const;
  /// Special tokens are skipped; unknown ids throw InputError.
  std::string decode(const std::vector<int>& ids) const;

  int id_of(char c) const;
  static bool is_special(int id) { return id == kPad || id == kBos || id == kEos; }

 private:
  std::array<int, 256> to_id_{};
  std::array<char, kVocabSize> to_char_{};
};

const Tokenizer& default_tokenizer();

}  // namespace lopt
