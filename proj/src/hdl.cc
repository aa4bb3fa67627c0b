#include "meltrtl/hdl.h"

#include <algorithm>
#include <array>

#include "meltrtl/error.h"

namespace meltrtl {

std::string_view category_name(Category c) {
  switch (c) {
    case Category::kCombinational: return "Combinational";
    case Category::kSequential: return "Sequential";
    case Category::kFsm: return "FSM";
  }
  return "?";
}

std::optional<Category> category_from_name(std::string_view name) {
  for (int i = 0; i < kNumCategories; ++i) {
    const auto c = static_cast<Category>(i);
    if (category_name(c) == name) return c;
  }
  return std::nullopt;
}

Category Program::category() const {
  if (!states.empty()) return Category::kFsm;
  if (!registers.empty()) return Category::kSequential;
  return Category::kCombinational;
}

int Program::add_leaf(Token sym) {
  nodes.push_back({ExprNode::Kind::kLeaf, sym, -1, -1});
  return static_cast<int>(nodes.size()) - 1;
}

int Program::add_not(int operand) {
  nodes.push_back({ExprNode::Kind::kNot, Token::kNot, operand, -1});
  return static_cast<int>(nodes.size()) - 1;
}

int Program::add_binary(Token op, int lhs, int rhs) {
  nodes.push_back({ExprNode::Kind::kBinary, op, lhs, rhs});
  return static_cast<int>(nodes.size()) - 1;
}

namespace {

struct ParseAbort {
  SyntaxError error;
};

class Cursor {
 public:
  explicit Cursor(const TokenSeq& toks) : toks_(toks) {}

  bool done() const { return pos_ >= toks_.size(); }
  std::size_t pos() const { return pos_; }
  std::optional<Token> peek() const {
    if (done()) return std::nullopt;
    return toks_[pos_];
  }
  bool peek_is(Token t) const { return !done() && toks_[pos_] == t; }

  Token take(const char* expected) {
    if (done()) error(std::string("unexpected end of input, expected ") + expected);
    return toks_[pos_++];
  }
  void expect(Token t) {
    if (done())
      error("unexpected end of input, expected '" + std::string(token_name(t)) + "'");
    if (toks_[pos_] != t)
      error("expected '" + std::string(token_name(t)) + "', found '" +
            std::string(token_name(toks_[pos_])) + "'");
    ++pos_;
  }
  bool accept(Token t) {
    if (peek_is(t)) {
      ++pos_;
      return true;
    }
    return false;
  }

  [[noreturn]] void error(const std::string& msg) const { error_at(pos_, msg); }
  [[noreturn]] void error_at(std::size_t at, const std::string& msg) const {
    throw ParseAbort{{at, msg}};
  }

 private:
  const TokenSeq& toks_;
  std::size_t pos_ = 0;
};

// Symbols visible to expressions while parsing.
struct Scope {
  std::vector<Token> registers;
  std::vector<Token> states;

  bool has_register(Token t) const {
    return std::find(registers.begin(), registers.end(), t) != registers.end();
  }
  bool has_state(Token t) const {
    return std::find(states.begin(), states.end(), t) != states.end();
  }
};

int parse_leaf(Cursor& cur, Program& p, const Scope& scope) {
  const std::size_t at = cur.pos();
  const Token t = cur.take("an operand");
  if (is_input(t) || is_literal(t)) return p.add_leaf(t);
  if (is_register(t)) {
    if (!scope.has_register(t)) cur.error_at(at, "register used before declaration");
    return p.add_leaf(t);
  }
  if (is_state(t)) {
    if (!scope.has_state(t)) cur.error_at(at, "undeclared state");
    return p.add_leaf(t);
  }
  cur.error_at(at, "expected an operand, found '" + std::string(token_name(t)) + "'");
}

int parse_infix(Cursor& cur, Program& p, const Scope& scope);

int parse_unary(Cursor& cur, Program& p, const Scope& scope) {
  if (cur.accept(Token::kNot)) return p.add_not(parse_unary(cur, p, scope));
  if (cur.accept(Token::kLParen)) {
    const int e = parse_infix(cur, p, scope);
    cur.expect(Token::kRParen);
    return e;
  }
  return parse_leaf(cur, p, scope);
}

int parse_infix(Cursor& cur, Program& p, const Scope& scope) {
  int lhs = parse_unary(cur, p, scope);
  while (!cur.done() && is_binary_op(*cur.peek())) {
    const Token op = cur.take("operator");
    const int rhs = parse_unary(cur, p, scope);
    lhs = p.add_binary(op, lhs, rhs);
  }
  return lhs;
}

int parse_prefix(Cursor& cur, Program& p, const Scope& scope) {
  const auto t = cur.peek();
  if (t && is_binary_op(*t)) {
    cur.take("operator");
    const int l = parse_prefix(cur, p, scope);
    const int r = parse_prefix(cur, p, scope);
    return p.add_binary(*t, l, r);
  }
  if (cur.accept(Token::kNot)) return p.add_not(parse_prefix(cur, p, scope));
  return parse_leaf(cur, p, scope);
}

Token expect_state(Cursor& cur, const Scope& scope) {
  const std::size_t at = cur.pos();
  const Token t = cur.take("a state");
  if (!is_state(t)) cur.error_at(at, "expected a state identifier");
  if (!scope.has_state(t)) cur.error_at(at, "undeclared state");
  return t;
}

Program parse_code_impl(const TokenSeq& toks) {
  Cursor cur(toks);
  Program p;
  Scope scope;
  cur.expect(Token::kModule);
  bool states_declared = false;
  while (true) {
    const std::size_t at = cur.pos();
    const Token t = cur.take("a statement or END");
    if (t == Token::kEnd) break;
    if (t == Token::kAssign) {
      if (p.out >= 0) cur.error_at(at, "OUT assigned twice");
      cur.expect(Token::kOut);
      cur.expect(Token::kEq);
      p.out = parse_infix(cur, p, scope);
    } else if (t == Token::kReg) {
      const std::size_t rat = cur.pos();
      const Token r = cur.take("a register");
      if (!is_register(r)) cur.error_at(rat, "expected a register name");
      if (scope.has_register(r)) cur.error_at(rat, "register declared twice");
      cur.expect(Token::kEq);
      const std::size_t lat = cur.pos();
      const Token lit = cur.take("a reset literal");
      if (!is_literal(lit)) cur.error_at(lat, "expected reset literal 0 or 1");
      scope.registers.push_back(r);
      p.registers.push_back({r, static_cast<std::uint8_t>(lit == Token::kOne), -1});
    } else if (is_register(t)) {
      auto it = std::find_if(p.registers.begin(), p.registers.end(),
                             [&](const Register& r) { return r.name == t; });
      if (it == p.registers.end()) cur.error_at(at, "update of undeclared register");
      if (it->next >= 0) cur.error_at(at, "register updated twice");
      cur.expect(Token::kArrow);
      const int e = parse_infix(cur, p, scope);
      // `it` may be stale only if registers grew, which parse_infix never does.
      it->next = e;
    } else if (t == Token::kState) {
      if (states_declared) cur.error_at(at, "STATE declared twice");
      states_declared = true;
      while (!cur.done() && is_state(*cur.peek())) {
        const std::size_t sat = cur.pos();
        const Token s = cur.take("state");
        if (scope.has_state(s)) cur.error_at(sat, "state declared twice");
        scope.states.push_back(s);
      }
      if (scope.states.empty()) cur.error("STATE needs at least one state");
      p.states = scope.states;
    } else if (is_state(t)) {
      if (!scope.has_state(t)) cur.error_at(at, "transition from undeclared state");
      for (const auto& tr : p.transitions)
        if (tr.from == t) cur.error_at(at, "state has two transitions");
      cur.expect(Token::kColon);
      cur.expect(Token::kIf);
      Transition tr;
      tr.from = t;
      tr.condition = parse_infix(cur, p, scope);
      cur.expect(Token::kGoto);
      tr.on_true = expect_state(cur, scope);
      cur.expect(Token::kElse);
      cur.expect(Token::kGoto);
      tr.on_false = expect_state(cur, scope);
      p.transitions.push_back(tr);
    } else {
      cur.error_at(at, "unexpected '" + std::string(token_name(t)) + "' at statement start");
    }
    cur.accept(Token::kSemi);
  }
  const std::size_t end_at = cur.pos() - 1;
  if (!cur.done()) cur.error("tokens after END");
  if (p.out < 0) cur.error_at(end_at, "module never assigns OUT");
  if (p.transitions.size() != p.states.size())
    cur.error_at(end_at, "every declared state needs exactly one transition");
  return p;
}

Program parse_spec_impl(const TokenSeq& toks) {
  Cursor cur(toks);
  Program p;
  Scope scope;
  if (!cur.done() && is_source(*cur.peek())) cur.take("source");
  const std::size_t at = cur.pos();
  const Token kind = cur.take("COMB, SEQ or FSM");
  if (kind == Token::kComb) {
    p.out = parse_prefix(cur, p, scope);
  } else if (kind == Token::kSeq) {
    // Declarations come first so next-state expressions may reference any register.
    struct Pending {
      std::size_t expr_pos;
    };
    std::vector<Pending> pending;
    while (!cur.done() && is_register(*cur.peek())) {
      const std::size_t rat = cur.pos();
      const Token r = cur.take("register");
      if (scope.has_register(r)) cur.error_at(rat, "register declared twice");
      const std::size_t lat = cur.pos();
      const Token lit = cur.take("reset literal");
      if (!is_literal(lit)) cur.error_at(lat, "expected reset literal");
      scope.registers.push_back(r);
      p.registers.push_back({r, static_cast<std::uint8_t>(lit == Token::kOne), -1});
      pending.push_back({cur.pos()});
      // Skip the expression for now; re-parse once every register is known.
      Program scratch;
      Scope all;
      all.registers = {Token::kR0, Token::kR1};
      parse_prefix(cur, scratch, all);
    }
    if (p.registers.empty()) cur.error("SEQ needs at least one register");
    cur.expect(Token::kOut);
    for (std::size_t i = 0; i < pending.size(); ++i) {
      Cursor sub(toks);
      while (sub.pos() < pending[i].expr_pos) sub.take("skip");
      p.registers[i].next = parse_prefix(sub, p, scope);
    }
    p.out = parse_prefix(cur, p, scope);
  } else if (kind == Token::kFsm) {
    while (!cur.done() && is_state(*cur.peek())) {
      const std::size_t sat = cur.pos();
      const Token s = cur.take("state");
      if (scope.has_state(s)) cur.error_at(sat, "state declared twice");
      scope.states.push_back(s);
    }
    if (scope.states.empty()) cur.error("FSM needs at least one state");
    p.states = scope.states;
    cur.expect(Token::kSemi);
    while (!cur.done() && is_state(*cur.peek())) {
      const std::size_t fat = cur.pos();
      Transition tr;
      tr.from = expect_state(cur, scope);
      for (const auto& other : p.transitions)
        if (other.from == tr.from) cur.error_at(fat, "state has two transitions");
      tr.condition = parse_prefix(cur, p, scope);
      tr.on_true = expect_state(cur, scope);
      tr.on_false = expect_state(cur, scope);
      cur.expect(Token::kSemi);
      p.transitions.push_back(tr);
    }
    if (p.transitions.size() != p.states.size())
      cur.error("every declared state needs exactly one transition");
    cur.expect(Token::kOut);
    int out = -1;
    while (!cur.done()) {
      const int leaf = p.add_leaf(expect_state(cur, scope));
      out = out < 0 ? leaf : p.add_binary(Token::kOr, out, leaf);
    }
    if (out < 0) cur.error("FSM output needs at least one state");
    p.out = out;
  } else {
    cur.error_at(at, "expected COMB, SEQ or FSM");
  }
  if (!cur.done()) cur.error("trailing tokens in specification");
  return p;
}

void render_infix(const Program& p, int n, TokenSeq& out) {
  const ExprNode& e = p.nodes[static_cast<std::size_t>(n)];
  switch (e.kind) {
    case ExprNode::Kind::kLeaf:
      out.push_back(e.sym);
      return;
    case ExprNode::Kind::kNot: {
      out.push_back(Token::kNot);
      const bool wrap = p.nodes[static_cast<std::size_t>(e.lhs)].kind == ExprNode::Kind::kBinary;
      if (wrap) out.push_back(Token::kLParen);
      render_infix(p, e.lhs, out);
      if (wrap) out.push_back(Token::kRParen);
      return;
    }
    case ExprNode::Kind::kBinary: {
      render_infix(p, e.lhs, out);
      out.push_back(e.sym);
      const bool wrap = p.nodes[static_cast<std::size_t>(e.rhs)].kind == ExprNode::Kind::kBinary;
      if (wrap) out.push_back(Token::kLParen);
      render_infix(p, e.rhs, out);
      if (wrap) out.push_back(Token::kRParen);
      return;
    }
  }
}

void render_prefix(const Program& p, int n, TokenSeq& out) {
  const ExprNode& e = p.nodes[static_cast<std::size_t>(n)];
  switch (e.kind) {
    case ExprNode::Kind::kLeaf:
      out.push_back(e.sym);
      return;
    case ExprNode::Kind::kNot:
      out.push_back(Token::kNot);
      render_prefix(p, e.lhs, out);
      return;
    case ExprNode::Kind::kBinary:
      out.push_back(e.sym);
      render_prefix(p, e.lhs, out);
      render_prefix(p, e.rhs, out);
      return;
  }
}

// Collects the states of an OR-chain of state leaves; false if the output has another shape.
bool collect_output_states(const Program& p, int n, std::vector<Token>& out) {
  const ExprNode& e = p.nodes[static_cast<std::size_t>(n)];
  if (e.kind == ExprNode::Kind::kLeaf && is_state(e.sym)) {
    out.push_back(e.sym);
    return true;
  }
  if (e.kind == ExprNode::Kind::kBinary && e.sym == Token::kOr)
    return collect_output_states(p, e.lhs, out) && collect_output_states(p, e.rhs, out);
  return false;
}

}  // namespace

ParseResult parse_code(const TokenSeq& code) {
  try {
    return parse_code_impl(code);
  } catch (const ParseAbort& abort) {
    return abort.error;
  }
}

ParseResult parse_spec(const TokenSeq& spec) {
  try {
    return parse_spec_impl(spec);
  } catch (const ParseAbort& abort) {
    return abort.error;
  }
}

TokenSeq render_code(const Program& p) {
  TokenSeq out{Token::kModule};
  for (const Register& r : p.registers) {
    out.insert(out.end(), {Token::kReg, r.name, Token::kEq, r.reset ? Token::kOne : Token::kZero,
                           Token::kSemi});
  }
  for (const Register& r : p.registers) {
    if (r.next < 0) continue;
    out.insert(out.end(), {r.name, Token::kArrow});
    render_infix(p, r.next, out);
    out.push_back(Token::kSemi);
  }
  if (!p.states.empty()) {
    out.push_back(Token::kState);
    out.insert(out.end(), p.states.begin(), p.states.end());
    out.push_back(Token::kSemi);
    for (const Transition& t : p.transitions) {
      out.insert(out.end(), {t.from, Token::kColon, Token::kIf});
      render_infix(p, t.condition, out);
      out.insert(out.end(), {Token::kGoto, t.on_true, Token::kElse, Token::kGoto, t.on_false,
                             Token::kSemi});
    }
  }
  out.insert(out.end(), {Token::kAssign, Token::kOut, Token::kEq});
  render_infix(p, p.out, out);
  out.push_back(Token::kSemi);
  out.push_back(Token::kEnd);
  return out;
}

TokenSeq render_spec(const Program& p, std::optional<Token> source) {
  TokenSeq out;
  if (source) out.push_back(*source);
  switch (p.category()) {
    case Category::kCombinational:
      out.push_back(Token::kComb);
      render_prefix(p, p.out, out);
      break;
    case Category::kSequential:
      out.push_back(Token::kSeq);
      for (const Register& r : p.registers) {
        require(r.next >= 0, "render_spec: specification registers need an update");
        out.push_back(r.name);
        out.push_back(r.reset ? Token::kOne : Token::kZero);
        render_prefix(p, r.next, out);
      }
      out.push_back(Token::kOut);
      render_prefix(p, p.out, out);
      break;
    case Category::kFsm: {
      require(p.registers.empty(), "render_spec: FSM specifications cannot hold registers");
      std::vector<Token> outs;
      require(collect_output_states(p, p.out, outs),
              "render_spec: FSM output must be an OR of states");
      out.push_back(Token::kFsm);
      out.insert(out.end(), p.states.begin(), p.states.end());
      out.push_back(Token::kSemi);
      for (const Transition& t : p.transitions) {
        out.push_back(t.from);
        render_prefix(p, t.condition, out);
        out.push_back(t.on_true);
        out.push_back(t.on_false);
        out.push_back(Token::kSemi);
      }
      out.push_back(Token::kOut);
      out.insert(out.end(), outs.begin(), outs.end());
      break;
    }
  }
  return out;
}

Simulator::Simulator(const Program& program) : program_(&program) {
  require(program.registers.size() <= 8, "Simulator: too many registers");
  transition_of_state_.assign(program.states.size(), -1);
  for (std::size_t t = 0; t < program.transitions.size(); ++t) {
    const auto& tr = program.transitions[t];
    const auto it = std::find(program.states.begin(), program.states.end(), tr.from);
    transition_of_state_[static_cast<std::size_t>(it - program.states.begin())] =
        static_cast<int>(t);
  }
  reset();
}

void Simulator::reset() {
  regs_ = 0;
  for (std::size_t i = 0; i < program_->registers.size(); ++i)
    if (program_->registers[i].reset) regs_ |= static_cast<std::uint8_t>(1u << i);
  state_ = 0;
}

std::uint8_t Simulator::eval(int n, InputVector in) const {
  const ExprNode& e = program_->nodes[static_cast<std::size_t>(n)];
  switch (e.kind) {
    case ExprNode::Kind::kNot:
      return eval(e.lhs, in) ^ 1u;
    case ExprNode::Kind::kBinary: {
      const std::uint8_t l = eval(e.lhs, in);
      const std::uint8_t r = eval(e.rhs, in);
      switch (e.sym) {
        case Token::kAnd: return l & r;
        case Token::kOr: return l | r;
        case Token::kXor: return l ^ r;
        case Token::kNand: return (l & r) ^ 1u;
        case Token::kNor: return (l | r) ^ 1u;
        case Token::kXnor: return (l ^ r) ^ 1u;
        default: return 0;
      }
    }
    case ExprNode::Kind::kLeaf:
      break;
  }
  switch (e.sym) {
    case Token::kA: return in.a;
    case Token::kB: return in.b;
    case Token::kC: return in.c;
    case Token::kZero: return 0;
    case Token::kOne: return 1;
    default: break;
  }
  if (is_register(e.sym)) {
    for (std::size_t i = 0; i < program_->registers.size(); ++i)
      if (program_->registers[i].name == e.sym) return (regs_ >> i) & 1u;
    return 0;
  }
  if (is_state(e.sym)) {
    if (program_->states.empty()) return 0;
    return program_->states[state_] == e.sym ? 1 : 0;
  }
  return 0;
}

std::uint8_t Simulator::step(InputVector in) {
  const std::uint8_t out = eval(program_->out, in);
  std::uint8_t next = regs_;
  for (std::size_t i = 0; i < program_->registers.size(); ++i) {
    const Register& r = program_->registers[i];
    if (r.next < 0) continue;
    const std::uint8_t bit = eval(r.next, in);
    next = static_cast<std::uint8_t>((next & ~(1u << i)) | (bit << i));
  }
  if (!program_->states.empty()) {
    const auto& tr = program_->transitions[static_cast<std::size_t>(
        transition_of_state_[state_])];
    const Token target = eval(tr.condition, in) ? tr.on_true : tr.on_false;
    const auto it = std::find(program_->states.begin(), program_->states.end(), target);
    state_ = static_cast<std::uint8_t>(it - program_->states.begin());
  }
  regs_ = next;
  return out;
}

namespace {

constexpr std::array<InputVector, 8> kAllInputs = {{{0, 0, 0},
                                                     {0, 0, 1},
                                                     {0, 1, 0},
                                                     {0, 1, 1},
                                                     {1, 0, 0},
                                                     {1, 0, 1},
                                                     {1, 1, 0},
                                                     {1, 1, 1}}};

bool agree_from(Simulator& a, Simulator& b, int depth) {
  if (depth == 0) return true;
  const auto sa = a.snapshot();
  const auto sb = b.snapshot();
  for (const InputVector& in : kAllInputs) {
    a.restore(sa);
    b.restore(sb);
    if (a.step(in) != b.step(in)) return false;
    if (!agree_from(a, b, depth - 1)) return false;
  }
  return true;
}

}  // namespace

bool equivalent(const Program& pa, const Program& pb) {
  Simulator a(pa);
  Simulator b(pb);
  const int depth = (pa.stateful() || pb.stateful()) ? kStimulusDepth : 1;
  return agree_from(a, b, depth);
}

int check_functional(const TokenSeq& spec, const TokenSeq& code) {
  const ParseResult s = parse_spec(spec);
  if (!std::holds_alternative<Program>(s)) return 0;
  const ParseResult c = parse_code(code);
  if (!std::holds_alternative<Program>(c)) return 0;
  return equivalent(std::get<Program>(s), std::get<Program>(c)) ? 1 : 0;
}

}  // namespace meltrtl
