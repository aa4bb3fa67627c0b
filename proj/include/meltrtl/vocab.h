#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace meltrtl {

// Fixed symbol table of the mini-HDL. Integer ids are part of the model and
// dataset file formats (docs/formats.md); append only.
enum class Token : std::uint8_t {
  kPad, kBos, kSep,
  kModule, kEnd, kAssign, kReg, kState, kGoto, kIf, kElse,
  kAnd, kOr, kXor, kNand, kNor, kXnor, kNot,
  kA, kB, kC, kOut, kR0, kR1, kS0, kS1, kS2, kS3,
  kZero, kOne,
  kEq, kArrow, kSemi, kColon, kLParen, kRParen,
  kComb, kSeq, kFsm,
  kSrc0, kSrc1, kSrc2, kSrc3,
  kCount
};

inline constexpr int kVocabSize = static_cast<int>(Token::kCount);
inline constexpr std::size_t kMaxProgramTokens = 64;
inline constexpr int kNumSources = 4;

using TokenSeq = std::vector<Token>;

inline int token_id(Token t) { return static_cast<int>(t); }
Token token_from_id(int id);

std::string_view token_name(Token t);
std::optional<Token> token_from_name(std::string_view name);

std::string join_tokens(const TokenSeq& tokens);
// Throws kParse naming the first unknown symbol.
TokenSeq split_tokens(std::string_view text);

inline bool is_binary_op(Token t) { return t >= Token::kAnd && t <= Token::kXnor; }
inline bool is_input(Token t) { return t >= Token::kA && t <= Token::kC; }
inline bool is_register(Token t) { return t == Token::kR0 || t == Token::kR1; }
inline bool is_state(Token t) { return t >= Token::kS0 && t <= Token::kS3; }
inline bool is_literal(Token t) { return t == Token::kZero || t == Token::kOne; }
inline bool is_source(Token t) { return t >= Token::kSrc0 && t <= Token::kSrc3; }
inline int source_index(Token t) { return static_cast<int>(t) - static_cast<int>(Token::kSrc0); }
inline Token source_token(int i) {
  return static_cast<Token>(static_cast<int>(Token::kSrc0) + i);
}

}  // namespace meltrtl
