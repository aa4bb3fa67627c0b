#pragma once

// Mini-HDL: abstract program form, the code and specification parsers, and
// the cycle simulator used as the functional-correctness oracle.
//
// Code grammar (left-associative, all binary operators share one precedence):
//   program    := MODULE item* END
//   item       := ASSIGN OUT = expr ;
//               | REG reg = lit ;
//               | reg <= expr ;
//               | STATE state+ ;
//               | state : IF expr GOTO state ELSE GOTO state ;
//   expr       := unary (binop unary)*
//   unary      := NOT unary | atom
//   atom       := A | B | C | reg | state | lit | ( expr )
//
// Specification grammar (prefix expressions, optional provenance tag):
//   spec       := [SRCk] (COMB pexpr
//                       | SEQ (reg lit pexpr)+ OUT pexpr
//                       | FSM state+ ; (state pexpr state state ;)+ OUT state+)
//   pexpr      := binop pexpr pexpr | NOT pexpr | atom

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "meltrtl/vocab.h"

namespace meltrtl {

enum class Category : std::uint8_t { kCombinational = 0, kSequential = 1, kFsm = 2 };
inline constexpr int kNumCategories = 3;

std::string_view category_name(Category c);
std::optional<Category> category_from_name(std::string_view name);

struct ExprNode {
  enum class Kind : std::uint8_t { kLeaf, kNot, kBinary };
  Kind kind = Kind::kLeaf;
  Token sym = Token::kZero;  // leaf symbol or binary operator
  int lhs = -1;              // operand of NOT, left of binary
  int rhs = -1;
};

struct Register {
  Token name = Token::kR0;
  std::uint8_t reset = 0;
  int next = -1;  // -1: no update statement, the register holds its reset value
};

struct Transition {
  Token from = Token::kS0;
  int condition = -1;
  Token on_true = Token::kS0;
  Token on_false = Token::kS0;
};

// Structured form of a well-formed program (from code or from a specification).
struct Program {
  std::vector<ExprNode> nodes;
  int out = -1;
  std::vector<Register> registers;
  std::vector<Token> states;  // first entry is the reset state
  std::vector<Transition> transitions;

  bool stateful() const { return !registers.empty() || !states.empty(); }
  // STATE present => FSM, else REG present => Sequential, else Combinational.
  Category category() const;

  int add_leaf(Token sym);
  int add_not(int operand);
  int add_binary(Token op, int lhs, int rhs);
};

struct SyntaxError {
  std::size_t token_index = 0;  // first offending token; == size for premature end
  std::string message;
};

using ParseResult = std::variant<Program, SyntaxError>;

ParseResult parse_code(const TokenSeq& code);
ParseResult parse_spec(const TokenSeq& spec);

inline bool parses(const TokenSeq& code) {
  return std::holds_alternative<Program>(parse_code(code));
}

// Rendering back to tokens (used by the generator).
TokenSeq render_code(const Program& p);
TokenSeq render_spec(const Program& p, std::optional<Token> source);

struct InputVector {
  std::uint8_t a = 0, b = 0, c = 0;
};

class Simulator {
 public:
  explicit Simulator(const Program& program);
  void reset();
  // Output for the current cycle, then the clock edge.
  std::uint8_t step(InputVector in);

  struct Snapshot {
    std::uint8_t regs = 0;
    std::uint8_t state = 0;
  };
  Snapshot snapshot() const { return {regs_, state_}; }
  void restore(Snapshot s) {
    regs_ = s.regs;
    state_ = s.state;
  }

 private:
  std::uint8_t eval(int node, InputVector in) const;

  const Program* program_;
  std::vector<int> transition_of_state_;
  std::uint8_t regs_ = 0;  // bit i = registers[i]
  std::uint8_t state_ = 0;
};

// Exhaustive stimulus depth for stateful equivalence checking.
inline constexpr int kStimulusDepth = 4;

// True when both programs produce identical output traces for every stimulus
// sequence of length <= kStimulusDepth over all A/B/C assignments (or on all
// eight assignments when both are stateless).
bool equivalent(const Program& a, const Program& b);

// 1 iff the code parses and is equivalent to the program the spec describes.
int check_functional(const TokenSeq& spec, const TokenSeq& code);

}  // namespace meltrtl
