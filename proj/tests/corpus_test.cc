#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "meltrtl/binio.h"
#include "meltrtl/corpus.h"
#include "meltrtl/error.h"

namespace meltrtl {
namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("meltrtl_corpus_test_" + name);
}

TEST(GenerateCorpus, CountsAndOracleLabels) {
  const DatasetManifest m = generate_corpus(7, 64, 0.5);
  ASSERT_EQ(m.samples.size(), 192u);
  const auto counts = m.counts();
  int zeros = 0;
  for (const auto& c : counts) {
    EXPECT_EQ(c[0], 32);
    EXPECT_EQ(c[1], 32);
    zeros += c[0];
  }
  EXPECT_EQ(zeros, 96);
  std::set<std::uint32_t> ids;
  for (const Sample& s : m.samples) {
    EXPECT_TRUE(ids.insert(s.id).second);
    EXPECT_EQ(s.label, check_functional(s.spec, s.code));
    EXPECT_EQ(s.well_formed, parses(s.code) ? 1 : 0);
    if (s.label == 1) {
      EXPECT_EQ(s.well_formed, 1);
    }
    EXPECT_LE(s.code.size(), kMaxProgramTokens);
    EXPECT_LE(s.spec.size(), kMaxProgramTokens);
  }
}

TEST(GenerateCorpus, TwoHundredSampleDefault) {
  const auto sizes = split_total(200);
  EXPECT_EQ(sizes[0] + sizes[1] + sizes[2], 200);
  EXPECT_EQ(sizes[0], 67);
  EXPECT_EQ(sizes[2], 66);
  const DatasetManifest m = generate_corpus_sized(1, sizes, 0.5);
  EXPECT_EQ(m.samples.size(), 200u);
  int buggy = 0;
  for (const Sample& s : m.samples) buggy += s.label == 0;
  EXPECT_EQ(buggy, 100);
}

TEST(GenerateCorpus, DeterministicForSeed) {
  EXPECT_EQ(to_jsonl(generate_corpus(11, 16, 0.3)), to_jsonl(generate_corpus(11, 16, 0.3)));
  EXPECT_NE(to_jsonl(generate_corpus(11, 16, 0.3)), to_jsonl(generate_corpus(12, 16, 0.3)));
}

TEST(GenerateCorpus, RejectsBadArguments) {
  EXPECT_THROW(generate_corpus(1, 3, 0.5), Error);
  EXPECT_THROW(generate_corpus(1, 10, 0.95), Error);
  EXPECT_THROW(generate_corpus(1, 10, 0.05), Error);
}

TEST(GenerateCorpus, CategoriesAreStructural) {
  const DatasetManifest m = generate_corpus(3, 20, 0.5);
  for (const Sample& s : m.samples) {
    const bool has_state = std::find(s.code.begin(), s.code.end(), Token::kState) != s.code.end();
    const bool has_reg = std::find(s.code.begin(), s.code.end(), Token::kReg) != s.code.end();
    const Category expect = has_state ? Category::kFsm
                            : has_reg ? Category::kSequential
                                      : Category::kCombinational;
    EXPECT_EQ(s.category, expect);
  }
}

TEST(Mutate, EveryMutationChangesSemantics) {
  Rng rng(5);
  std::set<MutationKind> seen;
  for (int i = 0; i < 900; ++i) {
    const Program p = random_program(rng, static_cast<Category>(i % 3));
    const TokenSeq spec = render_spec(p, std::nullopt);
    ASSERT_EQ(check_functional(spec, render_code(p)), 1);
    MutationKind kind;
    const auto q = mutate(rng, p, &kind);
    if (!q) continue;
    seen.insert(kind);
    EXPECT_EQ(check_functional(spec, render_code(*q)), 0) << join_tokens(render_code(*q));
  }
  EXPECT_EQ(seen.size(), 5u);
}

TEST(LazyDefaults, RemovesInversionsResetsAndFallThroughs) {
  const auto code = split_tokens(
      "MODULE REG R0 = 1 ; R0 <= R0 NAND A ; ASSIGN OUT = R0 XNOR B ; END");
  const Program lazy = lazy_defaults(std::get<Program>(parse_code(code)));
  EXPECT_EQ(join_tokens(render_code(lazy)),
            "MODULE REG R0 = 0 ; R0 <= R0 AND A ; ASSIGN OUT = R0 XOR B ; END");
  const auto fsm = split_tokens(
      "MODULE STATE S0 S1 S2 ; S0 : IF A GOTO S1 ELSE GOTO S2 ; S1 : IF B GOTO S2 ELSE GOTO S1 ; "
      "S2 : IF A GOTO S0 ELSE GOTO S2 ; ASSIGN OUT = S2 ; END");
  const Program lazy_fsm = lazy_defaults(std::get<Program>(parse_code(fsm)));
  for (const auto& t : lazy_fsm.transitions) EXPECT_EQ(t.on_false, Token::kS0);
}

TEST(PretrainingCorpus, SourceQualityDrivesCorrectness) {
  const DatasetManifest m = generate_pretraining_corpus(2, 3000);
  std::array<int, kNumSources> n{}, ok{};
  for (const Sample& s : m.samples) {
    const int src = source_index(s.spec.front());
    ++n[static_cast<std::size_t>(src)];
    ok[static_cast<std::size_t>(src)] += s.label;
    EXPECT_EQ(s.well_formed, 1);
  }
  for (int i = 0; i < kNumSources; ++i) EXPECT_GT(n[static_cast<std::size_t>(i)], 600);
  const auto rate = [&](int i) {
    return static_cast<double>(ok[static_cast<std::size_t>(i)]) / n[static_cast<std::size_t>(i)];
  };
  EXPECT_GT(rate(0), 0.9);
  EXPECT_GT(rate(1), rate(2) + 0.2);
  EXPECT_LT(rate(3), 0.5);
}

TEST(PromptSet, IdsStartAtBaseAndCodeIsReference) {
  const DatasetManifest m = generate_prompt_set(4, 30, 1000);
  ASSERT_EQ(m.samples.size(), 30u);
  EXPECT_EQ(m.samples.front().id, 1000u);
  for (const Sample& s : m.samples) EXPECT_EQ(s.label, 1);
}

TEST(DatasetFile, RoundTripsThroughJsonl) {
  const DatasetManifest m = generate_corpus(9, 8, 0.5);
  const auto path = temp_path("rt.jsonl");
  write_dataset(m, path);
  const DatasetManifest back = ingest_external(path);
  EXPECT_EQ(back.samples, m.samples);
  std::filesystem::remove(path);
}

TEST(DatasetFile, EmptyFileGivesEmptyManifest) {
  EXPECT_TRUE(parse_dataset("").samples.empty());
  EXPECT_TRUE(parse_dataset("\n\n").samples.empty());
}

TEST(DatasetFile, MissingLabelNamesLineAndField) {
  const std::string text =
      R"({"id":0,"category":"FSM","label":1,"well_formed":1,"spec_tokens":"COMB A","code_tokens":"MODULE END"})"
      "\n"
      R"({"id":1,"category":"FSM","well_formed":1,"spec_tokens":"COMB A","code_tokens":"MODULE END"})"
      "\n";
  try {
    parse_dataset(text);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParse);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("label"), std::string::npos);
  }
}

TEST(DatasetFile, ValidatesRecordInvariants) {
  auto rejects = [](const std::string& line, const std::string& field) {
    try {
      parse_dataset(line);
    } catch (const Error& e) {
      return std::string(e.what()).find(field) != std::string::npos;
    }
    return false;
  };
  EXPECT_TRUE(rejects(
      R"({"id":0,"category":"FSM","label":1,"well_formed":0,"spec_tokens":"","code_tokens":""})",
      "well_formed"));
  EXPECT_TRUE(rejects(
      R"({"id":0,"category":"Analog","label":1,"well_formed":1,"spec_tokens":"","code_tokens":""})",
      "category"));
  EXPECT_TRUE(rejects(
      R"({"id":0,"category":"FSM","label":2,"well_formed":1,"spec_tokens":"","code_tokens":""})",
      "label"));
  EXPECT_TRUE(rejects(
      R"({"id":0,"category":"FSM","label":0,"well_formed":1,"spec_tokens":"","code_tokens":"MODULE WIRE"})",
      "code_tokens"));
  EXPECT_TRUE(rejects("not json", "line 1"));
  EXPECT_TRUE(rejects(
      R"({"id":4,"category":"FSM","label":0,"well_formed":0,"spec_tokens":"","code_tokens":""})"
      "\n"
      R"({"id":4,"category":"FSM","label":0,"well_formed":0,"spec_tokens":"","code_tokens":""})",
      "id"));
}

TEST(DatasetFile, TwoHundredExternalRecords) {
  std::string text;
  for (int i = 0; i < 200; ++i)
    text += R"({"id":)" + std::to_string(i) +
            R"(,"category":"Combinational","label":)" + std::to_string(i % 2) +
            R"(,"well_formed":1,"spec_tokens":"COMB AND A B","code_tokens":"MODULE ASSIGN OUT = A AND B ; END"})"
            "\n";
  EXPECT_EQ(parse_dataset(text).samples.size(), 200u);
}

}  // namespace
}  // namespace meltrtl
