#include "meltrtl/corpus.h"

#include <cmath>
#include <set>
#include <sstream>

#include <json.hpp>

#include "meltrtl/binio.h"
#include "meltrtl/error.h"

namespace meltrtl {

namespace {

constexpr std::array<Token, 6> kBinaryOps = {Token::kAnd,  Token::kOr,  Token::kXor,
                                             Token::kNand, Token::kNor, Token::kXnor};
constexpr std::array<Token, 3> kInputs = {Token::kA, Token::kB, Token::kC};
constexpr std::array<Token, 4> kStates = {Token::kS0, Token::kS1, Token::kS2, Token::kS3};

template <std::size_t N>
Token pick_other(Rng& rng, const std::array<Token, N>& pool, Token current) {
  Token t;
  do {
    t = pool[rng.below(N)];
  } while (t == current);
  return t;
}

int random_expr(Rng& rng, Program& p, const std::vector<Token>& leaves, int depth) {
  if (depth == 0) {
    const int leaf = p.add_leaf(rng.pick(leaves));
    return rng.bernoulli(0.2) ? p.add_not(leaf) : leaf;
  }
  const Token op = kBinaryOps[rng.below(kBinaryOps.size())];
  const int lhs = random_expr(rng, p, leaves, 0);
  const int rhs = random_expr(rng, p, leaves, rng.bernoulli(0.5) ? depth - 1 : 0);
  return p.add_binary(op, lhs, rhs);
}

Token sample_source(Rng& rng, int label) {
  std::array<double, kNumSources> w{};
  for (int s = 0; s < kNumSources; ++s)
    w[static_cast<std::size_t>(s)] = label ? 1.0 - kSourceBugRate[static_cast<std::size_t>(s)]
                                           : kSourceBugRate[static_cast<std::size_t>(s)];
  return source_token(static_cast<int>(rng.weighted(w)));
}

Sample make_sample(std::uint32_t id, const Program& reference, const Program& code, Token source) {
  Sample s;
  s.id = id;
  s.category = reference.category();
  s.spec = render_spec(reference, source);
  s.code = render_code(code);
  s.well_formed = parses(s.code) ? 1 : 0;
  s.label = static_cast<std::uint8_t>(check_functional(s.spec, s.code));
  return s;
}

bool apply_mutation(Rng& rng, Program& q, MutationKind kind) {
  switch (kind) {
    case MutationKind::kOperatorSwap: {
      std::vector<std::size_t> ops;
      for (std::size_t i = 0; i < q.nodes.size(); ++i)
        if (q.nodes[i].kind == ExprNode::Kind::kBinary) ops.push_back(i);
      if (ops.empty()) return false;
      ExprNode& n = q.nodes[rng.pick(ops)];
      n.sym = pick_other(rng, kBinaryOps, n.sym);
      return true;
    }
    case MutationKind::kOperandSwap: {
      std::vector<std::size_t> leaves;
      for (std::size_t i = 0; i < q.nodes.size(); ++i)
        if (q.nodes[i].kind == ExprNode::Kind::kLeaf && is_input(q.nodes[i].sym))
          leaves.push_back(i);
      if (leaves.empty()) return false;
      ExprNode& n = q.nodes[rng.pick(leaves)];
      n.sym = pick_other(rng, kInputs, n.sym);
      return true;
    }
    case MutationKind::kWrongReset: {
      if (q.registers.empty()) return false;
      auto& r = q.registers[rng.below(q.registers.size())];
      r.reset ^= 1u;
      return true;
    }
    case MutationKind::kWrongTransition: {
      if (q.transitions.size() < 2) return false;
      auto& t = q.transitions[rng.below(q.transitions.size())];
      std::vector<Token> others;
      Token& target = rng.bernoulli(0.5) ? t.on_true : t.on_false;
      for (Token s : q.states)
        if (s != target) others.push_back(s);
      target = rng.pick(others);
      return true;
    }
    case MutationKind::kDroppedRegister: {
      std::vector<std::size_t> updated;
      for (std::size_t i = 0; i < q.registers.size(); ++i)
        if (q.registers[i].next >= 0) updated.push_back(i);
      if (updated.empty()) return false;
      q.registers[rng.pick(updated)].next = -1;
      return true;
    }
  }
  return false;
}

std::vector<MutationKind> menu_for(Category c) {
  switch (c) {
    case Category::kCombinational:
      return {MutationKind::kOperatorSwap, MutationKind::kOperandSwap};
    case Category::kSequential:
      return {MutationKind::kOperatorSwap, MutationKind::kOperandSwap, MutationKind::kWrongReset,
              MutationKind::kDroppedRegister};
    case Category::kFsm:
      return {MutationKind::kWrongTransition, MutationKind::kOperandSwap};
  }
  return {};
}

}  // namespace

std::array<std::array<int, 2>, kNumCategories> DatasetManifest::counts() const {
  std::array<std::array<int, 2>, kNumCategories> c{};
  for (const Sample& s : samples) ++c[static_cast<std::size_t>(s.category)][s.label];
  return c;
}

Program random_program(Rng& rng, Category category) {
  Program p;
  switch (category) {
    case Category::kCombinational: {
      std::vector<Token> inputs(kInputs.begin(), kInputs.end());
      rng.shuffle(inputs);
      inputs.resize(rng.bernoulli(0.5) ? 2 : 3);
      p.out = random_expr(rng, p, inputs, rng.bernoulli(0.5) ? 1 : 2);
      break;
    }
    case Category::kSequential: {
      Register r;
      r.name = Token::kR0;
      r.reset = rng.bernoulli(0.5) ? 1 : 0;
      const std::vector<Token> inputs = {Token::kA, Token::kB};
      const Token next_op = kBinaryOps[rng.below(kBinaryOps.size())];
      const int next_lhs = p.add_leaf(Token::kR0);
      const int next_rhs = p.add_leaf(rng.pick(inputs));
      r.next = p.add_binary(next_op, next_lhs, next_rhs);
      const Token out_op = kBinaryOps[rng.below(kBinaryOps.size())];
      const int out_lhs = p.add_leaf(Token::kR0);
      const int out_rhs = p.add_leaf(rng.pick(inputs));
      p.out = p.add_binary(out_op, out_lhs, out_rhs);
      p.registers.push_back(r);
      break;
    }
    case Category::kFsm: {
      const std::size_t n = 2 + rng.below(3);
      p.states.assign(kStates.begin(), kStates.begin() + static_cast<std::ptrdiff_t>(n));
      const std::vector<Token> conds = {Token::kA, Token::kB};
      for (Token s : p.states) {
        Transition t;
        t.from = s;
        t.condition = p.add_leaf(rng.pick(conds));
        t.on_true = rng.pick(p.states);
        t.on_false = rng.pick(p.states);
        p.transitions.push_back(t);
      }
      std::vector<Token> candidates(p.states.begin() + 1, p.states.end());
      rng.shuffle(candidates);
      candidates.resize(n > 2 && rng.bernoulli(0.5) ? 2 : 1);
      std::sort(candidates.begin(), candidates.end());
      int out = -1;
      for (Token s : candidates) {
        const int leaf = p.add_leaf(s);
        out = out < 0 ? leaf : p.add_binary(Token::kOr, out, leaf);
      }
      p.out = out;
      break;
    }
  }
  return p;
}

std::optional<Program> mutate(Rng& rng, const Program& p, MutationKind* kind) {
  const auto menu = menu_for(p.category());
  for (int attempt = 0; attempt < 64; ++attempt) {
    const MutationKind k = menu[rng.below(menu.size())];
    Program q = p;
    if (!apply_mutation(rng, q, k)) continue;
    if (equivalent(p, q)) continue;
    if (kind) *kind = k;
    return q;
  }
  return std::nullopt;
}

Program lazy_defaults(const Program& p) {
  Program q = p;
  for (ExprNode& n : q.nodes) {
    if (n.kind != ExprNode::Kind::kBinary) continue;
    if (n.sym == Token::kNand) n.sym = Token::kAnd;
    if (n.sym == Token::kNor) n.sym = Token::kOr;
    if (n.sym == Token::kXnor) n.sym = Token::kXor;
  }
  for (Register& r : q.registers) r.reset = 0;
  if (!q.states.empty())
    for (Transition& t : q.transitions) t.on_false = q.states.front();
  return q;
}

std::array<int, kNumCategories> split_total(int total) {
  std::array<int, kNumCategories> sizes{};
  for (int c = 0; c < kNumCategories; ++c)
    sizes[static_cast<std::size_t>(c)] = total / kNumCategories + (c < total % kNumCategories);
  return sizes;
}

DatasetManifest generate_corpus(std::uint64_t seed, int n_per_category, double buggy_fraction) {
  return generate_corpus_sized(seed, {n_per_category, n_per_category, n_per_category},
                               buggy_fraction);
}

DatasetManifest generate_corpus_sized(std::uint64_t seed,
                                      const std::array<int, kNumCategories>& sizes,
                                      double buggy_fraction) {
  for (int n : sizes) require(n >= 4, "generate_corpus: need at least 4 samples per category");
  require(buggy_fraction >= 0.1 && buggy_fraction <= 0.9,
          "generate_corpus: buggy_fraction must lie in [0.1, 0.9]");
  Rng rng(Rng::mix(seed, 0x636f72707573ULL));
  DatasetManifest m;
  m.seed = seed;
  std::uint32_t next_id = 0;
  int cumulative = 0;
  for (int c = 0; c < kNumCategories; ++c) {
    const auto category = static_cast<Category>(c);
    const int n = sizes[static_cast<std::size_t>(c)];
    // Rounded on cumulative counts so the corpus-wide buggy total is round(total * fraction).
    const int n_buggy = static_cast<int>(std::lround((cumulative + n) * buggy_fraction) -
                                         std::lround(cumulative * buggy_fraction));
    cumulative += n;
    std::vector<int> labels(static_cast<std::size_t>(n), 1);
    std::fill(labels.begin(), labels.begin() + n_buggy, 0);
    rng.shuffle(labels);
    for (int label : labels) {
      const Token source = sample_source(rng, label);
      while (true) {
        const Program p = random_program(rng, category);
        if (label == 1) {
          m.samples.push_back(make_sample(next_id++, p, p, source));
          break;
        }
        const auto q = mutate(rng, p);
        if (!q) continue;
        m.samples.push_back(make_sample(next_id++, p, *q, source));
        break;
      }
    }
  }
  return m;
}

DatasetManifest generate_pretraining_corpus(std::uint64_t seed, int n) {
  require(n > 0, "generate_pretraining_corpus: n must be positive");
  Rng rng(Rng::mix(seed, 0x707265747261ULL));
  DatasetManifest m;
  m.seed = seed;
  for (int i = 0; i < n; ++i) {
    const auto category = static_cast<Category>(i % kNumCategories);
    const Program p = random_program(rng, category);
    const int src = static_cast<int>(rng.below(kNumSources));
    const bool sloppy = rng.bernoulli(kSourceBugRate[static_cast<std::size_t>(src)]);
    m.samples.push_back(make_sample(static_cast<std::uint32_t>(i), p,
                                    sloppy ? lazy_defaults(p) : p, source_token(src)));
  }
  return m;
}

DatasetManifest generate_prompt_set(std::uint64_t seed, int n, std::uint32_t id_base) {
  require(n > 0, "generate_prompt_set: n must be positive");
  Rng rng(Rng::mix(seed, 0x70726f6d7074ULL));
  DatasetManifest m;
  m.seed = seed;
  for (int i = 0; i < n; ++i) {
    const auto category = static_cast<Category>(i % kNumCategories);
    const Program p = random_program(rng, category);
    const Token source = source_token(static_cast<int>(rng.below(kNumSources)));
    m.samples.push_back(make_sample(id_base + static_cast<std::uint32_t>(i), p, p, source));
  }
  return m;
}

std::string to_jsonl(const DatasetManifest& m) {
  std::string out;
  for (const Sample& s : m.samples) {
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["category"] = std::string(category_name(s.category));
    j["label"] = s.label;
    j["well_formed"] = s.well_formed;
    j["spec_tokens"] = join_tokens(s.spec);
    j["code_tokens"] = join_tokens(s.code);
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_dataset(const DatasetManifest& m, const std::filesystem::path& path) {
  write_file_bytes(path, to_jsonl(m));
}

namespace {

[[noreturn]] void record_error(std::size_t line, const std::string& field, const std::string& why) {
  fail(ErrorCode::kParse, "dataset line " + std::to_string(line) + ": field '" + field + "' " + why);
}

const nlohmann::json& field(const nlohmann::json& j, std::size_t line, const char* name) {
  const auto it = j.find(name);
  if (it == j.end()) record_error(line, name, "is missing");
  return *it;
}

int binary_field(const nlohmann::json& j, std::size_t line, const char* name) {
  const auto& v = field(j, line, name);
  if (!v.is_number_integer() || (v.get<int>() != 0 && v.get<int>() != 1))
    record_error(line, name, "must be 0 or 1");
  return v.get<int>();
}

TokenSeq token_field(const nlohmann::json& j, std::size_t line, const char* name) {
  const auto& v = field(j, line, name);
  if (!v.is_string()) record_error(line, name, "must be a string of symbol names");
  TokenSeq toks;
  try {
    toks = split_tokens(v.get<std::string>());
  } catch (const Error& e) {
    record_error(line, name, e.what());
  }
  if (toks.size() > kMaxProgramTokens)
    record_error(line, name, "exceeds " + std::to_string(kMaxProgramTokens) + " tokens");
  return toks;
}

}  // namespace

DatasetManifest parse_dataset(const std::string& text) {
  DatasetManifest m;
  std::set<std::uint32_t> ids;
  std::istringstream in(text);
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (raw.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorCode::kParse, "dataset line " + std::to_string(line) + ": not a JSON object");
    }
    if (!j.is_object())
      fail(ErrorCode::kParse, "dataset line " + std::to_string(line) + ": not a JSON object");
    Sample s;
    const auto& id = field(j, line, "id");
    if (!id.is_number_unsigned() || id.get<std::uint64_t>() > UINT32_MAX)
      record_error(line, "id", "must be a non-negative 32-bit integer");
    s.id = id.get<std::uint32_t>();
    if (!ids.insert(s.id).second) record_error(line, "id", "duplicates an earlier record");
    const auto& cat = field(j, line, "category");
    const auto category = cat.is_string() ? category_from_name(cat.get<std::string>()) : std::nullopt;
    if (!category) record_error(line, "category", "must be Combinational, Sequential or FSM");
    s.category = *category;
    s.label = static_cast<std::uint8_t>(binary_field(j, line, "label"));
    s.well_formed = static_cast<std::uint8_t>(binary_field(j, line, "well_formed"));
    if (s.label == 1 && s.well_formed == 0)
      record_error(line, "well_formed", "must be 1 when label is 1");
    s.spec = token_field(j, line, "spec_tokens");
    s.code = token_field(j, line, "code_tokens");
    m.samples.push_back(std::move(s));
  }
  return m;
}

DatasetManifest ingest_external(const std::filesystem::path& path) {
  return parse_dataset(read_file_bytes(path));
}

}  // namespace meltrtl
