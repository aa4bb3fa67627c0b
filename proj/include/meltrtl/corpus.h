#pragma once

// Synthetic instruction/code corpora over the mini-HDL with oracle labels,
// plus the line-delimited dataset file format.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "meltrtl/hdl.h"
#include "meltrtl/rng.h"
#include "meltrtl/vocab.h"

namespace meltrtl {

struct Sample {
  std::uint32_t id = 0;
  TokenSeq spec;
  TokenSeq code;
  Category category = Category::kCombinational;
  std::uint8_t label = 0;        // 1 = functionally correct
  std::uint8_t well_formed = 0;  // 1 = code parses

  bool operator==(const Sample&) const = default;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::vector<Sample> samples;

  // counts[category][label]
  std::array<std::array<int, 2>, kNumCategories> counts() const;
};

// Probability that a specification tagged SRCk comes with a faulty reference
// implementation. Sources 0-1 are curated, 2-3 are sloppy.
inline constexpr std::array<double, kNumSources> kSourceBugRate = {0.05, 0.25, 0.75, 0.95};

// Random correct program of the given category. Programs render within
// kMaxProgramTokens and their specifications are always renderable.
Program random_program(Rng& rng, Category category);

enum class MutationKind : std::uint8_t {
  kOperatorSwap,
  kOperandSwap,
  kWrongReset,
  kWrongTransition,
  kDroppedRegister,
};

// One random mutation from the menu applicable to the program's category,
// retried until the result is observably different from `p`. Returns nullopt
// only if no semantic mutation exists.
std::optional<Program> mutate(Rng& rng, const Program& p, MutationKind* kind = nullptr);

// The characteristic mistakes of low-quality sources: inverted operators lose
// their inversion, register resets collapse to 0, FSM fall-through edges
// collapse to the reset state.
Program lazy_defaults(const Program& p);

// Balanced probe corpus: round(n * buggy_fraction) single-mutation
// buggy samples and the rest correct. Every label comes from check_functional.
DatasetManifest generate_corpus(std::uint64_t seed, int n_per_category, double buggy_fraction);
// Same, with an explicit size per category (a total of 200 splits 67/67/66).
DatasetManifest generate_corpus_sized(std::uint64_t seed,
                                      const std::array<int, kNumCategories>& sizes,
                                      double buggy_fraction);
std::array<int, kNumCategories> split_total(int total);

// Language-model pre-training corpus: source tags uniform, reference code
// affected by lazy_defaults with the source's bug rate. Labels by oracle.
DatasetManifest generate_pretraining_corpus(std::uint64_t seed, int n);

// Held-out prompts with uniformly drawn source tags; `code` holds the correct
// reference implementation. Ids start at `id_base`.
DatasetManifest generate_prompt_set(std::uint64_t seed, int n, std::uint32_t id_base);

// Dataset file: one JSON object per line with fields id, category, label,
// well_formed, spec_tokens, code_tokens (space-separated symbol names).
std::string to_jsonl(const DatasetManifest& m);
void write_dataset(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest parse_dataset(const std::string& text);
DatasetManifest ingest_external(const std::filesystem::path& path);

}  // namespace meltrtl
