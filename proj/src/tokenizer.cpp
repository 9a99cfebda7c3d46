#include "lopt/tokenizer.hpp"

#include "lopt/errors.hpp"

namespace lopt {

namespace {
constexpr std::string_view kSymbols = "+-*=|><.,:;?!()[]/#_@&%^ ";
}

Tokenizer::Tokenizer() {
  to_id_.fill(-1);
  to_char_.fill('\0');
  int next = 3;
  auto add = [&](char c) {
    to_id_[static_cast<unsigned char>(c)] = next;
    to_char_[next] = c;
    ++next;
  };
  for (char c = '0'; c <= '9'; ++c) add(c);
  for (char c = 'a'; c <= 'z'; ++c) add(c);
  for (char c : kSymbols) add(c);
  if (next != static_cast<int>(kVocabSize)) throw ContractError("tokenizer alphabet is not 64 symbols");
}

int Tokenizer::id_of(char c) const {
  const int id = to_id_[static_cast<unsigned char>(c)];
  if (id < 0) throw InputError(std::string("character '") + c + "' is outside the alphabet");
  return id;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(id_of(c));
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= static_cast<int>(kVocabSize)) throw InputError("token id " + std::to_string(id) + " unknown");
    if (!is_special(id)) out.push_back(to_char_[id]);
  }
  return out;
}

const Tokenizer& default_tokenizer() {
  static const Tokenizer tok;
  return tok;
}

}  // namespace lopt
