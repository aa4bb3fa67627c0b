#pragma once

// Next-token training of the transformer on prompt ‖ target pairs, with the
// loss restricted to target positions.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "meltrtl/corpus.h"
#include "meltrtl/model.h"

namespace meltrtl {

struct TrainingExample {
  TokenSeq prompt;  // conditioning tokens (spec ‖ SEP)
  TokenSeq target;  // tokens whose prediction is scored (code)
};

std::vector<TrainingExample> training_examples(const DatasetManifest& corpus);

struct TrainOptions {
  int steps = 600;
  int batch_size = 32;
  double learning_rate = 3e-3;
  int warmup_steps = 100;
  bool cosine_decay = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  // Called after every optimizer step with the pre-update batch loss.
  std::function<void(int step, double loss)> on_step;
};

struct TrainReport {
  double initial_loss = 0.0;  // batch loss at step 0
  double final_loss = 0.0;    // batch loss at the last step
  std::vector<double> losses;
};

// Mean cross-entropy over all target tokens of `batch`; when `grad` is given
// it receives d(loss)/d(params) (resized and overwritten).
double loss_and_grad(const ModelState& model, std::span<const TrainingExample* const> batch,
                     std::vector<double>* grad);

// Trains from ModelState::initialize(config). Throws kNumeric when the loss
// becomes non-finite.
ModelState train(const ModelConfig& config, const std::vector<TrainingExample>& corpus,
                 const TrainOptions& options, TrainReport* report = nullptr);

// Teacher-forced fraction of target tokens predicted by argmax.
double token_accuracy(const ModelState& model, const std::vector<TrainingExample>& examples);

}  // namespace meltrtl
