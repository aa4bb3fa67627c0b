#include "meltrtl/config.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <functional>

#include "meltrtl/error.h"

namespace meltrtl {
namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return static_cast<ErrorCode>(0);
}

TEST(ConfigTest, DefaultsValidate) {
  unsetenv(kOutDirEnv);
  RunConfig c;
  c.validate();
  EXPECT_EQ(c.model().n_layers, 6);
  EXPECT_EQ(c.train().steps, 600);
  EXPECT_EQ(c.corpus_size(), 200);
  EXPECT_EQ(c.eval_size(), 150);
  EXPECT_EQ(c.grid().size(), 330u);
  EXPECT_EQ(c.out_dir(), "meltrtl_out");
  EXPECT_EQ(c.steer_scope(), SteerScope::kGenerated);
}

TEST(ConfigTest, UnknownKeysAndBadValuesRejected) {
  RunConfig c;
  EXPECT_EQ(code_of([&] { c.set("model.layrs", "3"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([&] { c.merge_text("steer.k = 4\nbogus = 1\n"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([&] { c.merge_text("no equals sign\n"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([&] { c.set_assignment("steer.k"); }), ErrorCode::kConfig);
  c.set("steer.alpha", "abc");
  EXPECT_EQ(code_of([&] { c.alpha(); }), ErrorCode::kConfig);
  c.set("steer.alpha", "1.5");
  c.set("steer.family", "knn");
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::kConfig);
  c.set("steer.family", "mlp");
  c.set("steer.k", "49");
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::kConfig);
  c.set("steer.k", "48");
  c.set("model.heads", "7");
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::kConfig);
  c.set("model.heads", "8");
  c.set("grid.k", "5,5");
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::kConfig);
  c.set("grid.k", "5");
  c.validate();
}

TEST(ConfigTest, MergeOverridesAndComments) {
  RunConfig c;
  c.merge_text("# comment\nsteer.k = 7  # trailing\n\nsteer.alpha=2.5\nsteer.k = 9\n");
  c.set_assignment("steer.mode=routed");
  EXPECT_EQ(c.k(), 9);
  EXPECT_DOUBLE_EQ(c.alpha(), 2.5);
  EXPECT_EQ(c.mode(), ExpertMode::kRouted);
}

TEST(ConfigTest, TextRoundTrip) {
  RunConfig a;
  a.set("seed", "42");
  a.set("grid.alpha", "0.5,3.0");
  a.set("rtl.synth", "yosys -q {file}");
  RunConfig b;
  b.merge_text(a.to_text());
  EXPECT_EQ(a.to_text(), b.to_text());
  EXPECT_EQ(b.get("rtl.synth"), "yosys -q {file}");
  const std::string text = a.to_text();
  EXPECT_EQ(RunConfig::keys().size(),
            static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')));
}

TEST(ConfigTest, AutoSeedsFollowMasterSeed) {
  RunConfig a;
  RunConfig b;
  b.set("seed", "1");
  EXPECT_NE(a.model().seed, b.model().seed);
  EXPECT_NE(a.corpus_seed(), a.eval_seed());
  EXPECT_NE(a.eval_seed(), a.val_seed());
  EXPECT_EQ(a.corpus_seed(), RunConfig().corpus_seed());
  a.set("corpus.seed", "123");
  EXPECT_EQ(a.corpus_seed(), 123u);
  a.set("corpus.seed", "-1");
  EXPECT_EQ(code_of([&] { a.corpus_seed(); }), ErrorCode::kConfig);
}

TEST(ConfigTest, OutDirFromEnvironment) {
  setenv(kOutDirEnv, "/tmp/meltrtl_env_out", 1);
  RunConfig c;
  EXPECT_EQ(c.out_dir(), "/tmp/meltrtl_env_out");
  c.set("out_dir", "elsewhere");
  EXPECT_EQ(c.out_dir(), "elsewhere");
  unsetenv(kOutDirEnv);
}

}  // namespace
}  // namespace meltrtl
