#pragma once

// Scoring of greedy generations against the corpus oracle, the resumable
// experiment grid, overhead accounting and report emission.
//
// Results CSV (one row per cell):
//   family,K,alpha,mode,n,synth_pct,func_pct,func_comb,func_seq,func_fsm,mean_s,std_s,overhead_pct
// The Base reference row uses family "none", K 0 and alpha 0. Dynamic-mode
// cells carry the mode suffix ":dynamic". Journal: one completed cell key per
// line; each completed cell also owns cells/<key>.csv holding its row.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "meltrtl/corpus.h"
#include "meltrtl/harvest.h"
#include "meltrtl/model.h"
#include "meltrtl/probes.h"
#include "meltrtl/steering.h"

namespace meltrtl {

enum class ExpertMode : std::uint8_t { kBase, kGeneral, kComb, kSeq, kFsm, kMulti, kRouted };
std::string_view expert_mode_name(ExpertMode m);  // base general comb seq fsm multi routed
ExpertMode expert_mode_from_name(std::string_view name);  // kConfig on unknown

struct ExperimentSpec {
  ProbeFamily family = ProbeFamily::kLr;
  int k = 0;
  double alpha = 0.0;
  ExpertMode mode = ExpertMode::kBase;
  SteeringMode steering = SteeringMode::kStatic;
  std::uint64_t corpus_seed = 0;
  std::string model_id;
  int repetitions = 1;  // timing passes over the eval set

  // "svc-15-3.00-multi" ("-dynamic" appended for dynamic gating); "base" for Base.
  std::string key() const;
};

struct ExperimentResult {
  ExperimentSpec spec;
  int n_eval = 0;
  double synth_pct = 0.0;
  double func_pct = 0.0;
  std::array<double, kNumCategories> func_by_category{};  // NaN when a category is absent
  double mean_s = 0.0;  // per-sample generation seconds, warm-ups excluded
  double std_s = 0.0;
  double mean_token_s = 0.0;  // timed seconds per generated token
  double overhead_pct = 0.0;  // relative to the Base cell; NaN when unknown
  int truncated = 0;
  std::uint64_t extra_adds = 0;        // steering additions over all generated tokens
  std::uint64_t generated_tokens = 0;
  double mean_sequence_length = 0.0;   // prompt plus generated tokens
  std::vector<std::uint8_t> synthesizable, functional;  // per eval sample
};

struct EvalOptions {
  DecodeOptions decode;
  int warmup = 3;  // leading samples excluded from timing statistics
  int repetitions = 1;
};

// Greedy generation for every prompt of `eval_set`, scored by parse success
// (synthesizable) and check_functional. Generations that end without END are
// truncated and count as non-synthesizable. kContract when an eval id is in
// `training_ids`.
ExperimentResult evaluate(const ModelState& model, const SteeringPlan* plan,
                          const DatasetManifest& eval_set, const EvalOptions& options = {},
                          const DynamicGate& gate = {},
                          const std::vector<std::uint32_t>& training_ids = {});
// Per-prompt routing: each prompt is steered by the single expert route() picks.
ExperimentResult evaluate_routed(const ModelState& model, const ExpertRegistry& registry,
                                 double alpha, SteeringMode steering,
                                 const DatasetManifest& eval_set, const EvalOptions& options = {},
                                 const std::vector<std::uint32_t>& training_ids = {});

// Rankings and per-head probes for every family and scope of one store, from
// which expert registries for any (family, K, alpha) are assembled.
class ExpertBank {
 public:
  ExpertBank(const ActivationStore& store, const ModelState& model, const RankOptions& options);
  // Writes one probe bundle per family and scope, <family>_<scope>.bin, into `dir`.
  void save_probes(const std::filesystem::path& dir) const;
  // Rebuilds a bank from saved bundles; kMissingArtifact names an absent file.
  static ExpertBank load(const ActivationStore& store, const ModelState& model,
                         const std::filesystem::path& dir);

  const HeadRanking& ranking(ProbeFamily family, Scope scope) const;
  // Probes of every head, indexed layer * H + head.
  const std::vector<ProbeModel>& probes(ProbeFamily family, Scope scope) const;
  // General, comb, seq and fsm experts of size k (clamped to L*H).
  ExpertRegistry registry(ProbeFamily family, int k, double alpha, bool with_probes) const;
  const ActivationStore& store() const { return store_; }
  std::vector<HeadRanking> rankings() const;

 private:
  ExpertBank(const ActivationStore& store, const ModelState& model);

  ActivationStore store_;
  const ModelState* model_;
  std::map<std::pair<int, int>, HeadRanking> rankings_;
  std::map<std::pair<int, int>, std::vector<ProbeModel>> probes_;
};

struct GridDefinition {
  std::vector<ProbeFamily> families;
  std::vector<int> ks;
  std::vector<double> alphas;
  std::vector<ExpertMode> modes;
  SteeringMode steering = SteeringMode::kStatic;

  std::size_t size() const;
  std::vector<ExperimentSpec> cells() const;  // family-major, then K, alpha, mode
  void validate() const;                      // kConfig
};
// 3 families x K {5,...,45,48} x alpha {0.1, 0.5, ..., 5.0} x multi = 330 cells.
GridDefinition default_grid();

struct GridOptions {
  int workers = 1;
  std::filesystem::path work_dir;  // journal and per-cell rows; empty disables both
  bool resume = false;
  EvalOptions eval;
  std::vector<std::uint32_t> training_ids;
  std::function<void(const ExperimentResult&, bool resumed)> on_cell;
};

struct GridOutcome {
  std::vector<ExperimentResult> results;  // Base reference first, then cells in grid order
  std::vector<std::string> rows;          // CSV rows matching results
  std::vector<std::string> failures;      // "key: message"
  int resumed = 0;
};

GridOutcome run_grid(const ModelState& model, const ExpertBank& bank,
                     const DatasetManifest& eval_set, const GridDefinition& grid,
                     const GridOptions& options);

// One experiment cell outside the grid (Base when spec.mode is kBase).
ExperimentResult run_cell(const ModelState& model, const ExpertBank& bank,
                          const DatasetManifest& eval_set, const ExperimentSpec& spec,
                          const EvalOptions& options,
                          const std::vector<std::uint32_t>& training_ids = {});

inline constexpr std::string_view kResultsHeader =
    "family,K,alpha,mode,n,synth_pct,func_pct,func_comb,func_seq,func_fsm,mean_s,std_s,"
    "overhead_pct";
std::string result_row(const ExperimentResult& r);
std::string results_csv(const std::vector<ExperimentResult>& results);
// Parses rows produced by result_row (spec and aggregate fields only).
ExperimentResult parse_result_row(std::string_view row);
std::vector<ExperimentResult> parse_results_csv(std::string_view csv);

struct OverheadReport {
  double base_mean_s = 0.0;
  double steered_mean_s = 0.0;
  double measured_pct = 0.0;  // per sample
  double base_token_s = 0.0;
  double steered_token_s = 0.0;
  double measured_token_pct = 0.0;
  double analytic_pct = 0.0;       // 100 * |L_i| / (s * d_model)
  int intervened_layers = 0;       // |L_i|
  double mean_sequence_length = 0.0;  // s
  std::uint64_t extra_adds_per_token = 0;  // |L_i| * d_model
  std::uint64_t counted_extra_adds = 0;    // instrumented, over the whole cell
  std::uint64_t steered_tokens = 0;
};
// kContract when `base` is not a Base cell.
OverheadReport overhead_report(const ExperimentResult& base, const ExperimentResult& steered,
                               const SteeringPlan& plan, const ModelConfig& config);
std::string overhead_text(const OverheadReport& r);

struct ReportInputs {
  std::vector<ExperimentResult> results;
  std::vector<HeadRanking> rankings;
  const ExpertBank* bank = nullptr;
  int layer_split_k = 15;  // heads per expert counted in the layer distribution
  bool svg = true;
};
// Writes heatmaps/<family>_<scope>.csv (+ .svg), layer_distribution.csv,
// alpha_sweep.csv, norm_histogram.csv, projection.csv, leaderboard.csv and
// results.csv into `out_dir`. kIo when the directory cannot be written.
std::vector<std::filesystem::path> emit_reports(const ReportInputs& inputs,
                                                const std::filesystem::path& out_dir);

// Table pieces exposed for tests.
std::vector<std::vector<double>> heatmap_matrix(const HeadRanking& ranking);
struct LayerShare {
  ProbeFamily family;
  Scope scope;
  double first_half_pct = 0.0;
  double second_half_pct = 0.0;
};
std::vector<LayerShare> layer_distribution(const std::vector<HeadRanking>& rankings, int k);
std::string leaderboard_csv(const std::vector<ExperimentResult>& results, int n);

struct ExternalToolConfig {
  std::string synth_command;  // e.g. "yosys -q -p 'read_verilog {file}; synth'"
  std::string compile_command;  // e.g. "iverilog -o {out} {file} {tb}"
  std::string run_command;      // e.g. "vvp {out}"
  std::string pass_marker = "ALL TESTS PASSED";
  double timeout_s = 30.0;
  std::filesystem::path archive_dir;
};
struct RtlSample {
  std::string id;
  std::string verilog;
  std::string testbench;  // empty: synthesizability only
};
struct RtlVerdict {
  std::string id;
  bool synthesizable = false;
  bool functional = false;
  bool timed_out = false;
};
// kCapability when a configured tool is not found on PATH.
std::vector<RtlVerdict> external_rtl_eval(const std::vector<RtlSample>& samples,
                                          const ExternalToolConfig& config,
                                          ExperimentResult* summary = nullptr);

}  // namespace meltrtl
