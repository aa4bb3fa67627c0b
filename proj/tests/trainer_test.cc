#include "meltrtl/trainer.h"

#include <gtest/gtest.h>

#include <cmath>

#include "meltrtl/error.h"
#include "meltrtl/rng.h"

namespace meltrtl {
namespace {

ModelConfig micro_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.max_context = 16;
  c.seed = 3;
  return c;
}

TokenSeq random_tokens(Rng& rng, int n) {
  TokenSeq t;
  for (int i = 0; i < n; ++i) t.push_back(static_cast<Token>(rng.below(kVocabSize)));
  return t;
}

std::vector<TrainingExample> random_examples(Rng& rng, int n) {
  std::vector<TrainingExample> out;
  for (int i = 0; i < n; ++i)
    out.push_back({random_tokens(rng, 2 + static_cast<int>(rng.below(4))),
                   random_tokens(rng, 2 + static_cast<int>(rng.below(5)))});
  return out;
}

std::vector<const TrainingExample*> pointers(const std::vector<TrainingExample>& v) {
  std::vector<const TrainingExample*> p;
  for (const auto& e : v) p.push_back(&e);
  return p;
}

// Mean target cross-entropy computed from forward() logits alone.
double reference_loss(const ModelState& m, const std::vector<TrainingExample>& batch) {
  double loss = 0.0;
  std::size_t n = 0;
  for (const auto& ex : batch) {
    TokenSeq seq = ex.prompt;
    seq.insert(seq.end(), ex.target.begin(), ex.target.end());
    seq.pop_back();
    const ForwardTrace tr = forward(m, seq);
    for (std::size_t i = 0; i < ex.target.size(); ++i) {
      const auto lg = tr.logits_at(static_cast<int>(ex.prompt.size() - 1 + i));
      double mx = lg[0], sum = 0.0;
      for (double v : lg) mx = std::max(mx, v);
      for (double v : lg) sum += std::exp(v - mx);
      loss += std::log(sum) + mx - lg[token_id(ex.target[i])];
      ++n;
    }
  }
  return loss / static_cast<double>(n);
}

TEST(TrainerTest, LossMatchesForwardCrossEntropy) {
  const ModelState m = ModelState::initialize(micro_config());
  Rng rng(1);
  const auto batch = random_examples(rng, 4);
  EXPECT_NEAR(loss_and_grad(m, pointers(batch), nullptr), reference_loss(m, batch), 1e-12);
}

TEST(TrainerTest, GradientMatchesFiniteDifferencesPerBlock) {
  ModelState m = ModelState::initialize(micro_config());
  // Move layernorm parameters off their initial values so their gradients
  // are exercised away from the symmetric point.
  Rng rng(2);
  for (double& w : m.params()) w += 0.05 * rng.normal();
  const auto batch = random_examples(rng, 3);
  const auto ptrs = pointers(batch);
  std::vector<double> grad;
  loss_and_grad(m, ptrs, &grad);
  const double h = 1e-5;
  std::vector<double> numeric(grad.size());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double w0 = m.params()[i];
    m.params()[i] = w0 + h;
    const double up = loss_and_grad(m, ptrs, nullptr);
    m.params()[i] = w0 - h;
    const double down = loss_and_grad(m, ptrs, nullptr);
    m.params()[i] = w0;
    numeric[i] = (up - down) / (2 * h);
  }
  for (const auto& b : m.layout().blocks()) {
    double diff = 0.0, norm = 0.0;
    for (std::size_t i = b.offset; i < b.offset + b.size; ++i) {
      diff += (grad[i] - numeric[i]) * (grad[i] - numeric[i]);
      norm += numeric[i] * numeric[i];
    }
    if (norm == 0.0) {
      EXPECT_EQ(diff, 0.0) << b.name;
      continue;
    }
    EXPECT_LE(std::sqrt(diff / norm), 1e-4) << b.name;
  }
}

TEST(TrainerTest, LossDecreases) {
  Rng rng(3);
  const auto data = random_examples(rng, 16);
  TrainOptions opt;
  opt.steps = 60;
  opt.batch_size = 8;
  opt.warmup_steps = 5;
  TrainReport report;
  const ModelState m = train(micro_config(), data, opt, &report);
  EXPECT_EQ(report.losses.size(), 60u);
  EXPECT_LT(reference_loss(m, data), reference_loss(ModelState::initialize(micro_config()), data));
  EXPECT_LT(report.final_loss, report.initial_loss);
}

TEST(TrainerTest, MemorizesSmallSet) {
  ModelConfig c = micro_config();
  c.d_model = 16;
  Rng rng(4);
  const auto data = random_examples(rng, 8);
  TrainOptions opt;
  opt.steps = 2000;
  opt.batch_size = 8;
  opt.warmup_steps = 50;
  opt.learning_rate = 1e-2;
  const ModelState m = train(c, data, opt);
  EXPECT_GE(token_accuracy(m, data), 0.99);
}

TEST(TrainerTest, DeterministicForSeed) {
  Rng rng(5);
  const auto data = random_examples(rng, 10);
  TrainOptions opt;
  opt.steps = 10;
  opt.batch_size = 4;
  opt.seed = 9;
  EXPECT_EQ(train(micro_config(), data, opt).params(), train(micro_config(), data, opt).params());
}

TEST(TrainerTest, DivergenceIsNumericError) {
  Rng rng(6);
  const auto data = random_examples(rng, 4);
  TrainOptions opt;
  opt.steps = 5;
  opt.batch_size = 2;
  opt.learning_rate = std::nan("");
  try {
    train(micro_config(), data, opt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNumeric);
  }
}

TEST(TrainerTest, ExamplesUsePromptLayout) {
  DatasetManifest m;
  Sample s;
  s.spec = {Token::kComb, Token::kAnd, Token::kA, Token::kB};
  s.code = {Token::kModule, Token::kEnd};
  m.samples.push_back(s);
  const auto ex = training_examples(m);
  ASSERT_EQ(ex.size(), 1u);
  EXPECT_EQ(ex[0].prompt.back(), Token::kSep);
  EXPECT_EQ(ex[0].prompt.size(), 5u);
  EXPECT_EQ(ex[0].target, s.code);
}

}  // namespace
}  // namespace meltrtl
