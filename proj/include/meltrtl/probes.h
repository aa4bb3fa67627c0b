#pragma once

// Correctness probes over per-head activations: logistic regression, a
// one-hidden-layer MLP and an RBF-kernel SVC, their majority vote, and head
// ranking by validation accuracy.
//
// Probe bundle file: magic "MELTPRB\1", u32 version, u64 n_entries, then per
// entry u16 layer, u16 head and one encoded probe (see encode_probe), CRC-32.
// Ranking CSV: layer,head,family,scope,val_accuracy,rank.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "meltrtl/binio.h"
#include "meltrtl/harvest.h"

namespace meltrtl {

inline constexpr std::uint32_t kProbeFormatVersion = 1;

enum class ProbeFamily : std::uint8_t { kLr = 0, kMlp = 1, kSvc = 2 };
inline constexpr ProbeFamily kAllFamilies[] = {ProbeFamily::kLr, ProbeFamily::kMlp,
                                               ProbeFamily::kSvc};
std::string_view family_name(ProbeFamily f);  // "lr", "mlp", "svc"
ProbeFamily family_from_name(std::string_view name);  // kConfig on unknown

// Scope of a ranking or expert: one category, or every sample (general).
using Scope = std::optional<Category>;
std::string scope_name(Scope s);  // "general", "comb", "seq" or "fsm"
Scope scope_from_name(std::string_view name);

struct ProbeData {
  std::vector<Vec> x;
  std::vector<std::uint8_t> y;
};
ProbeData to_probe_data(const std::vector<ActivationRecord>& records);

struct LrOptions {
  int max_iter = 1000;
  double l2 = 0.01;
};
struct MlpOptions {
  int hidden = 64;
  int max_iter = 1000;
  double l2 = 0.01;
  double learning_rate = 0.01;
  std::uint64_t seed = 0;
};
struct SvcOptions {
  double C = 1.0;
  double gamma = 0.0;  // 0 selects 1 / (dim * variance of standardized features)
  double tol = 1e-3;
  int max_iter = 100000;
};
struct ProbeOptions {
  LrOptions lr;
  MlpOptions mlp;
  SvcOptions svc;
};

struct ProbeModel {
  ProbeFamily family = ProbeFamily::kLr;
  int dim = 0;
  Vec mean, scale;  // standardization: (h - mean) / scale
  // Logistic regression: sigmoid(w . x + b).
  Vec w;
  double b = 0.0;
  // MLP, flat [W1 (hidden x dim), b1 (hidden), w2 (hidden), b2].
  int hidden = 0;
  Vec mlp;
  // SVC: sum_j alpha_j y_j K(x_j, x) + bias.
  std::vector<Vec> support;
  Vec alpha;
  std::vector<std::int8_t> sv_label;  // +1 / -1
  double bias = 0.0;
  double gamma = 0.0;
  double C = 0.0;
  double kkt_gap = 0.0;  // max violation at termination

  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  int iterations = 0;
  bool converged = false;

  bool operator==(const ProbeModel&) const = default;
};

// All trainers throw kData when only one label is present; MLP throws kNumeric
// on a non-finite loss.
ProbeModel train_lr(const ProbeData& data, const LrOptions& options = {});
ProbeModel train_mlp(const ProbeData& data, const MlpOptions& options = {});
ProbeModel train_svc(const ProbeData& data, const SvcOptions& options = {});
ProbeModel train_probe(ProbeFamily family, const ProbeData& data, const ProbeOptions& options);

// Regularized MLP objective of `model.mlp` on `data` (standardized with the
// model's statistics); `grad` receives its gradient in the same flat layout.
double mlp_objective(const ProbeModel& model, const ProbeData& data, double l2, Vec* grad);

struct Prediction {
  std::uint8_t cls = 0;
  double score = 0.0;  // probability for LR/MLP, decision value for SVC
};
Prediction predict(const ProbeModel& probe, std::span<const double> h);  // kContract on dim
double accuracy(const ProbeModel& probe, const ProbeData& data);
std::uint8_t ensemble_vote(const ProbeModel& lr, const ProbeModel& mlp, const ProbeModel& svc,
                           std::span<const double> h);

struct HeadScore {
  int layer = 0;
  int head = 0;
  double val_accuracy = 0.0;
  double train_accuracy = 0.0;
  bool flagged = false;  // single-label or degenerate group, scored 0.5

  bool operator==(const HeadScore&) const = default;
};

struct HeadRanking {
  ProbeFamily family = ProbeFamily::kLr;
  Scope scope;
  int n_layers = 0, n_heads = 0;
  std::vector<HeadScore> entries;  // best first

  bool operator==(const HeadRanking&) const = default;
};

struct RankOptions {
  double train_fraction = 0.7;
  std::uint64_t split_seed = 0;
  ProbeOptions probe;
};

// Trains one probe per head on the scope-filtered train split and ranks heads
// by validation accuracy (desc), then layer, then head. When `probes` is given
// it receives the trained probe of every head, indexed layer * H + head.
HeadRanking rank_heads(const ActivationStore& store, ProbeFamily family, Scope scope,
                       const RankOptions& options, std::vector<ProbeModel>* probes = nullptr);

// Rebuilds the ranking rank_heads produced from its per-head probes (indexed
// layer * H + head); probes with dim 0 are the flagged heads.
HeadRanking ranking_from_probes(const std::vector<ProbeModel>& probes, ProbeFamily family,
                                Scope scope, int n_layers, int n_heads);

struct HeadId {
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadId&) const = default;
};
std::vector<HeadId> select_top_k(const HeadRanking& ranking, int k);

std::string ranking_csv(const HeadRanking& ranking);

void encode_probe(BinaryWriter& w, const ProbeModel& p);
ProbeModel decode_probe(BinaryReader& r);

struct ProbeBundleEntry {
  HeadId head;
  ProbeModel probe;
  bool operator==(const ProbeBundleEntry&) const = default;
};
void save_probe_bundle(const std::vector<ProbeBundleEntry>& entries,
                       const std::filesystem::path& path);
std::vector<ProbeBundleEntry> load_probe_bundle(const std::filesystem::path& path);

}  // namespace meltrtl
