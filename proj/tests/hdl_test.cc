#include <gtest/gtest.h>

#include <map>

#include "meltrtl/corpus.h"
#include "meltrtl/hdl.h"
#include "meltrtl/rng.h"

namespace meltrtl {
namespace {

TokenSeq T(std::string_view text) { return split_tokens(text); }

using Env = std::map<Token, int>;

int apply_op(Token op, int l, int r) {
  switch (op) {
    case Token::kAnd: return l & r;
    case Token::kOr: return l | r;
    case Token::kXor: return l ^ r;
    case Token::kNand: return 1 - (l & r);
    case Token::kNor: return 1 - (l | r);
    case Token::kXnor: return 1 - (l ^ r);
    default: ADD_FAILURE() << "not an operator"; return 0;
  }
}

// Second interpreter working directly on token streams, without the AST.

int eval_prefix(const TokenSeq& t, std::size_t& i, const Env& env) {
  const Token x = t[i++];
  if (is_binary_op(x)) {
    const int l = eval_prefix(t, i, env);
    const int r = eval_prefix(t, i, env);
    return apply_op(x, l, r);
  }
  if (x == Token::kNot) return 1 - eval_prefix(t, i, env);
  return env.at(x);
}

int eval_infix(const TokenSeq& t, std::size_t& i, const Env& env);

int eval_unary(const TokenSeq& t, std::size_t& i, const Env& env) {
  if (t[i] == Token::kNot) {
    ++i;
    return 1 - eval_unary(t, i, env);
  }
  if (t[i] == Token::kLParen) {
    ++i;
    const int v = eval_infix(t, i, env);
    ++i;
    return v;
  }
  return env.at(t[i++]);
}

int eval_infix(const TokenSeq& t, std::size_t& i, const Env& env) {
  int v = eval_unary(t, i, env);
  while (i < t.size() && is_binary_op(t[i])) {
    const Token op = t[i++];
    v = apply_op(op, v, eval_unary(t, i, env));
  }
  return v;
}

struct TokenMachine {
  std::map<Token, int> reset_regs;
  std::map<Token, TokenSeq> next;     // register -> expression tokens
  std::vector<Token> states;
  std::map<Token, std::pair<TokenSeq, std::pair<Token, Token>>> trans;
  TokenSeq out;
  bool infix = true;
  bool out_is_state_list = false;

  int eval(const TokenSeq& e, const Env& env) const {
    std::size_t i = 0;
    return infix ? eval_infix(e, i, env) : eval_prefix(e, i, env);
  }

  std::vector<int> run(const std::vector<std::array<int, 3>>& stim) const {
    std::map<Token, int> regs = reset_regs;
    Token state = states.empty() ? Token::kS0 : states.front();
    std::vector<int> trace;
    for (const auto& in : stim) {
      Env env{{Token::kA, in[0]}, {Token::kB, in[1]}, {Token::kC, in[2]},
              {Token::kZero, 0},  {Token::kOne, 1}};
      for (auto [r, v] : regs) env[r] = v;
      for (Token s : states) env[s] = s == state ? 1 : 0;
      if (out_is_state_list) {
        int o = 0;
        for (Token s : out) o |= env.at(s);
        trace.push_back(o);
      } else {
        trace.push_back(eval(out, env));
      }
      std::map<Token, int> nregs = regs;
      for (const auto& [r, e] : next) nregs[r] = eval(e, env);
      if (!states.empty()) {
        const auto& [cond, targets] = trans.at(state);
        state = eval(cond, env) ? targets.first : targets.second;
      }
      regs = nregs;
    }
    return trace;
  }
};

TokenSeq slice(const TokenSeq& t, std::size_t b, std::size_t e) {
  return TokenSeq(t.begin() + static_cast<std::ptrdiff_t>(b), t.begin() + static_cast<std::ptrdiff_t>(e));
}

TokenMachine machine_from_code(const TokenSeq& code) {
  TokenMachine m;
  std::vector<TokenSeq> stmts;
  TokenSeq cur;
  for (std::size_t i = 1; i + 1 < code.size(); ++i) {
    if (code[i] == Token::kSemi) {
      stmts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(code[i]);
    }
  }
  for (const TokenSeq& s : stmts) {
    if (s[0] == Token::kAssign) {
      m.out = slice(s, 3, s.size());
    } else if (s[0] == Token::kReg) {
      m.reset_regs[s[1]] = s[3] == Token::kOne;
    } else if (is_register(s[0])) {
      m.next[s[0]] = slice(s, 2, s.size());
    } else if (s[0] == Token::kState) {
      m.states = slice(s, 1, s.size());
    } else {
      const std::size_t g = static_cast<std::size_t>(
          std::find(s.begin(), s.end(), Token::kGoto) - s.begin());
      m.trans[s[0]] = {slice(s, 3, g), {s[g + 1], s[g + 4]}};
    }
  }
  return m;
}

// Prefix expression length, to walk the specification grammar.
std::size_t prefix_len(const TokenSeq& t, std::size_t i) {
  if (is_binary_op(t[i])) {
    const std::size_t l = prefix_len(t, i + 1);
    return 1 + l + prefix_len(t, i + 1 + l);
  }
  if (t[i] == Token::kNot) return 1 + prefix_len(t, i + 1);
  return 1;
}

TokenMachine machine_from_spec(const TokenSeq& spec) {
  TokenMachine m;
  m.infix = false;
  std::size_t i = is_source(spec[0]) ? 1 : 0;
  const Token kind = spec[i++];
  if (kind == Token::kComb) {
    m.out = slice(spec, i, spec.size());
  } else if (kind == Token::kSeq) {
    while (is_register(spec[i])) {
      const Token r = spec[i];
      m.reset_regs[r] = spec[i + 1] == Token::kOne;
      const std::size_t n = prefix_len(spec, i + 2);
      m.next[r] = slice(spec, i + 2, i + 2 + n);
      i += 2 + n;
    }
    m.out = slice(spec, i + 1, spec.size());
  } else {
    while (spec[i] != Token::kSemi) m.states.push_back(spec[i++]);
    ++i;
    while (spec[i] != Token::kOut) {
      const Token from = spec[i];
      const std::size_t n = prefix_len(spec, i + 1);
      m.trans[from] = {slice(spec, i + 1, i + 1 + n), {spec[i + 1 + n], spec[i + 2 + n]}};
      i += n + 4;
    }
    m.out = slice(spec, i + 1, spec.size());
    m.out_is_state_list = true;
  }
  return m;
}

std::vector<std::vector<std::array<int, 3>>> all_stimuli(int max_len) {
  std::vector<std::vector<std::array<int, 3>>> out{{}};
  std::vector<std::vector<std::array<int, 3>>> frontier{{}};
  for (int len = 1; len <= max_len; ++len) {
    std::vector<std::vector<std::array<int, 3>>> next;
    for (const auto& s : frontier)
      for (int v = 0; v < 8; ++v) {
        auto t = s;
        t.push_back({v >> 2 & 1, v >> 1 & 1, v & 1});
        next.push_back(t);
      }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

int independent_check(const TokenSeq& spec, const TokenSeq& code) {
  if (!parses(code)) return 0;
  const TokenMachine s = machine_from_spec(spec);
  const TokenMachine c = machine_from_code(code);
  static const auto stimuli = all_stimuli(4);
  for (const auto& stim : stimuli)
    if (s.run(stim) != c.run(stim)) return 0;
  return 1;
}

TEST(Parse, MinimalProgramIsCombinational) {
  const ParseResult r = parse_code(T("MODULE ASSIGN OUT = A AND B END"));
  ASSERT_TRUE(std::holds_alternative<Program>(r));
  const Program& p = std::get<Program>(r);
  EXPECT_EQ(p.category(), Category::kCombinational);
  EXPECT_FALSE(p.stateful());
  EXPECT_EQ(p.nodes[static_cast<std::size_t>(p.out)].kind, ExprNode::Kind::kBinary);
  EXPECT_EQ(p.nodes[static_cast<std::size_t>(p.out)].sym, Token::kAnd);
}

TEST(Parse, TruncatedProgramFailsAtTruncationPoint) {
  const TokenSeq full = T("MODULE ASSIGN OUT = A AND B ; END");
  for (std::size_t n = 0; n < full.size(); ++n) {
    const TokenSeq cut = slice(full, 0, n);
    const ParseResult r = parse_code(cut);
    ASSERT_TRUE(std::holds_alternative<SyntaxError>(r)) << n;
    EXPECT_EQ(std::get<SyntaxError>(r).token_index, n);
  }
}

TEST(Parse, FirstOffendingTokenIsReported) {
  auto err_at = [](std::string_view text) {
    const ParseResult r = parse_code(T(text));
    EXPECT_TRUE(std::holds_alternative<SyntaxError>(r)) << text;
    return std::holds_alternative<SyntaxError>(r) ? std::get<SyntaxError>(r).token_index
                                                   : SIZE_MAX;
  };
  EXPECT_EQ(err_at("MODULE ASSIGN OUT = A AND END"), 6u);
  EXPECT_EQ(err_at("ASSIGN OUT = A END"), 0u);
  EXPECT_EQ(err_at("MODULE ASSIGN OUT = A ; ASSIGN OUT = B ; END"), 6u);
  EXPECT_EQ(err_at("MODULE ASSIGN OUT = R0 ; END"), 4u);
  EXPECT_EQ(err_at("MODULE REG R0 = 0 ; R0 <= R0 ; R0 <= A ; ASSIGN OUT = R0 ; END"), 10u);
  EXPECT_EQ(err_at("MODULE ASSIGN OUT = A ; END END"), 7u);
  EXPECT_EQ(err_at("MODULE END"), 1u);
  EXPECT_EQ(err_at("MODULE STATE S0 S1 ; S0 : IF A GOTO S1 ELSE GOTO S0 ; ASSIGN OUT = S1 ; END"),
            20u);
  EXPECT_EQ(err_at("MODULE STATE S0 ; S0 : IF A GOTO S2 ELSE GOTO S0 ; ASSIGN OUT = S0 ; END"),
            9u);
  EXPECT_EQ(err_at("MODULE ASSIGN OUT = ( A OR B ; END"), 8u);
}

TEST(Parse, GeneratedProgramsRoundTrip) {
  Rng rng(17);
  for (int i = 0; i < 600; ++i) {
    const Program p = random_program(rng, static_cast<Category>(i % 3));
    const TokenSeq code = render_code(p);
    EXPECT_LE(code.size(), kMaxProgramTokens);
    const ParseResult r = parse_code(code);
    ASSERT_TRUE(std::holds_alternative<Program>(r)) << join_tokens(code);
    const Program& q = std::get<Program>(r);
    EXPECT_EQ(render_code(q), code);
    EXPECT_EQ(q.category(), p.category());
    EXPECT_TRUE(equivalent(p, q));
    const TokenSeq spec = render_spec(p, source_token(i % 4));
    const ParseResult s = parse_spec(spec);
    ASSERT_TRUE(std::holds_alternative<Program>(s)) << join_tokens(spec);
    EXPECT_EQ(render_spec(std::get<Program>(s), source_token(i % 4)), spec);
    for (std::size_t n = 0; n < code.size(); ++n) {
      const ParseResult cut = parse_code(slice(code, 0, n));
      ASSERT_TRUE(std::holds_alternative<SyntaxError>(cut));
      EXPECT_EQ(std::get<SyntaxError>(cut).token_index, n);
    }
  }
}

TEST(Render, ParenthesizesRightOperandsAndNegatedGroups) {
  const TokenSeq code = T("MODULE ASSIGN OUT = NOT ( A XOR B ) AND ( B OR NOT C ) ; END");
  const ParseResult r = parse_code(code);
  ASSERT_TRUE(std::holds_alternative<Program>(r));
  EXPECT_EQ(render_code(std::get<Program>(r)), code);
  EXPECT_EQ(render_spec(std::get<Program>(r), std::nullopt), T("COMB AND NOT XOR A B OR B NOT C"));
}

TEST(CheckFunctional, WrongOperatorIsRejected) {
  EXPECT_EQ(check_functional(T("COMB XOR A B"), T("MODULE ASSIGN OUT = A AND B ; END")), 0);
  EXPECT_EQ(check_functional(T("COMB XOR A B"), T("MODULE ASSIGN OUT = B XOR A ; END")), 1);
}

TEST(CheckFunctional, ToggleFsmMatchesItsOwnSpec) {
  const TokenSeq spec = T("FSM S0 S1 ; S0 A S1 S0 ; S1 A S0 S1 ; OUT S1");
  const TokenSeq code = T(
      "MODULE STATE S0 S1 ; S0 : IF A GOTO S1 ELSE GOTO S0 ; "
      "S1 : IF A GOTO S0 ELSE GOTO S1 ; ASSIGN OUT = S1 ; END");
  EXPECT_EQ(check_functional(spec, code), 1);
  const TokenSeq wrong = T(
      "MODULE STATE S0 S1 ; S0 : IF A GOTO S1 ELSE GOTO S0 ; "
      "S1 : IF A GOTO S0 ELSE GOTO S0 ; ASSIGN OUT = S1 ; END");
  EXPECT_EQ(check_functional(spec, wrong), 0);
}

TEST(CheckFunctional, SequentialResetAndUpdate) {
  const TokenSeq spec = T("SRC1 SEQ R0 1 XOR R0 A OUT AND R0 B");
  EXPECT_EQ(check_functional(spec, T("MODULE REG R0 = 1 ; R0 <= R0 XOR A ; "
                                     "ASSIGN OUT = R0 AND B ; END")),
            1);
  EXPECT_EQ(check_functional(spec, T("MODULE REG R0 = 0 ; R0 <= R0 XOR A ; "
                                     "ASSIGN OUT = R0 AND B ; END")),
            0);
  EXPECT_EQ(check_functional(spec, T("MODULE REG R0 = 1 ; ASSIGN OUT = R0 AND B ; END")), 0);
}

TEST(CheckFunctional, UnparseableCodeScoresZero) {
  EXPECT_EQ(check_functional(T("COMB A"), T("MODULE ASSIGN OUT = A")), 0);
  EXPECT_EQ(check_functional(T("COMB A"), TokenSeq{}), 0);
  EXPECT_EQ(check_functional(TokenSeq{}, T("MODULE ASSIGN OUT = A ; END")), 0);
}

TEST(CheckFunctional, AgreesWithTokenLevelInterpreter) {
  Rng rng(99);
  int rejected = 0;
  for (int i = 0; i < 450; ++i) {
    const Program p = random_program(rng, static_cast<Category>(i % 3));
    const TokenSeq spec = render_spec(p, source_token(0));
    Program variant = p;
    switch (i % 3) {
      case 0: break;
      case 1: variant = lazy_defaults(p); break;
      case 2: {
        const auto m = mutate(rng, p);
        if (m) variant = *m;
        break;
      }
    }
    const TokenSeq code = render_code(variant);
    const int ours = check_functional(spec, code);
    EXPECT_EQ(ours, independent_check(spec, code)) << join_tokens(spec) << " | "
                                                     << join_tokens(code);
    rejected += ours == 0;
  }
  EXPECT_GT(rejected, 100);
}

TEST(Simulator, SnapshotRestoreReplaysIdentically) {
  const ParseResult r = parse_code(T("MODULE REG R0 = 0 ; R0 <= R0 XOR A ; ASSIGN OUT = R0 ; END"));
  const Program& p = std::get<Program>(r);
  Simulator sim(p);
  EXPECT_EQ(sim.step({1, 0, 0}), 0);
  const auto snap = sim.snapshot();
  EXPECT_EQ(sim.step({0, 0, 0}), 1);
  sim.restore(snap);
  EXPECT_EQ(sim.step({1, 0, 0}), 1);
  EXPECT_EQ(sim.step({0, 0, 0}), 0);
  sim.reset();
  EXPECT_EQ(sim.step({0, 0, 0}), 0);
}

TEST(Category, NamesRoundTrip) {
  for (int c = 0; c < kNumCategories; ++c)
    EXPECT_EQ(category_from_name(category_name(static_cast<Category>(c))), static_cast<Category>(c));
  EXPECT_FALSE(category_from_name("Analog").has_value());
}

}  // namespace
}  // namespace meltrtl
