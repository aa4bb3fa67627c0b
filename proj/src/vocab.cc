#include "meltrtl/vocab.h"

#include <array>

#include "meltrtl/error.h"

namespace meltrtl {

namespace {

constexpr std::array<std::string_view, kVocabSize> kNames = {
    "PAD",   "BOS",  "SEP",  "MODULE", "END", "ASSIGN", "REG",  "STATE", "GOTO",
    "IF",    "ELSE", "AND",  "OR",     "XOR", "NAND",   "NOR",  "XNOR",  "NOT",
    "A",     "B",    "C",    "OUT",    "R0",  "R1",     "S0",   "S1",    "S2",
    "S3",    "0",    "1",    "=",      "<=",  ";",      ":",    "(",     ")",
    "COMB",  "SEQ",  "FSM",  "SRC0",   "SRC1", "SRC2",  "SRC3"};

}  // namespace

Token token_from_id(int id) {
  require(id >= 0 && id < kVocabSize, "token id out of range: " + std::to_string(id));
  return static_cast<Token>(id);
}

std::string_view token_name(Token t) { return kNames[static_cast<std::size_t>(t)]; }

std::optional<Token> token_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kNames.size(); ++i)
    if (kNames[i] == name) return static_cast<Token>(i);
  return std::nullopt;
}

std::string join_tokens(const TokenSeq& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += token_name(tokens[i]);
  }
  return out;
}

TokenSeq split_tokens(std::string_view text) {
  TokenSeq out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    if (i >= text.size()) break;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    const auto word = text.substr(i, j - i);
    const auto tok = token_from_name(word);
    if (!tok) fail(ErrorCode::kParse, "unknown symbol '" + std::string(word) + "'");
    out.push_back(*tok);
    i = j;
  }
  return out;
}

}  // namespace meltrtl
