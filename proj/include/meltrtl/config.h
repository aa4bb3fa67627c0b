#pragma once

// Run configuration: a plain-text "key = value" file ('#' starts a comment)
// merged with command-line overrides. Every key has a default; unknown keys
// and malformed values are kConfig errors.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "meltrtl/evalbench.h"
#include "meltrtl/harvest.h"
#include "meltrtl/model.h"
#include "meltrtl/probes.h"
#include "meltrtl/trainer.h"

namespace meltrtl {

// Environment variable naming the default output directory.
inline constexpr const char* kOutDirEnv = "MELTRTL_OUT";

class RunConfig {
 public:
  RunConfig();  // defaults; out_dir from kOutDirEnv when set

  // Applies "key = value" lines; later lines win.
  void merge_text(std::string_view text, std::string_view origin = "config");
  void merge_file(const std::filesystem::path& path);
  void set(std::string_view key, std::string_view value);
  // "key=value"
  void set_assignment(std::string_view assignment);

  const std::string& get(std::string_view key) const;
  // Cross-field checks; kConfig naming the offending key.
  void validate() const;
  // Every key in sorted order, one "key = value" line each.
  std::string to_text() const;
  static std::vector<std::string> keys();

  ModelConfig model() const;
  TrainOptions train() const;
  int lm_corpus_size() const;
  std::uint64_t lm_corpus_seed() const;
  std::uint64_t corpus_seed() const;
  int corpus_size() const;
  double buggy_fraction() const;
  PositionPolicy policy() const;
  RankOptions rank() const;
  ProbeFamily family() const;
  int k() const;
  double alpha() const;
  ExpertMode mode() const;
  SteeringMode steering() const;
  SteerScope steer_scope() const;
  EvalOptions eval() const;
  std::uint64_t eval_seed() const;
  int eval_size() const;
  std::uint64_t val_seed() const;
  int val_size() const;
  GridDefinition grid() const;
  int workers() const;
  std::filesystem::path out_dir() const;
  ExternalToolConfig rtl() const;

  int get_int(std::string_view key) const;
  std::uint64_t get_u64(std::string_view key) const;
  double get_double(std::string_view key) const;

 private:
  std::map<std::string, std::string, std::less<>> values_;
};

// Ids of the held-out sets start here so they never collide with corpus ids.
inline constexpr std::uint32_t kEvalIdBase = 1000000;
inline constexpr std::uint32_t kValIdBase = 2000000;

}  // namespace meltrtl
