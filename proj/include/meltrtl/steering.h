#pragma once

// Steering directions, per-scope expert profiles, routing and plan assembly.
//
// Expert registry file: magic "MELTEXP\1", u32 version, u32 n_profiles, then
// per profile: u8 scope (0-2 category, 255 general), u8 family, u32 k, f64
// alpha, u32 d_model, u32 n_heads, and per head u16 layer, u16 head, f64
// val_accuracy, f64 x d_model theta, u8 has_probes followed by the LR, MLP
// and SVC probes when set; trailing CRC-32.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "meltrtl/harvest.h"
#include "meltrtl/model.h"
#include "meltrtl/probes.h"

namespace meltrtl {

inline constexpr std::uint32_t kExpertFormatVersion = 1;

// normalize(Q * (mean of label-1 activations - mean of label-0 activations))
// over the scope-filtered (layer, head) group. kData for single-label groups
// and for a zero mean difference.
Vec compute_direction(const ActivationStore& store, int layer, int head, const Mat& q,
                      Scope scope);

struct ExpertHead {
  HeadId head;
  Vec theta;  // unit norm, length d_model
  double val_accuracy = 0.0;
  std::optional<std::array<ProbeModel, 3>> probes;  // LR, MLP, SVC for dynamic gating

  bool operator==(const ExpertHead&) const = default;
};

struct ExpertProfile {
  Scope scope;
  ProbeFamily family = ProbeFamily::kLr;
  int k = 0;  // requested size; heads.size() may be smaller after degenerate drops
  double alpha = 0.0;
  std::vector<ExpertHead> heads;

  bool operator==(const ExpertProfile&) const = default;
};

struct ExpertOptions {
  bool attach_probes = false;
  RankOptions rank;  // split and probe settings used for the attached probes
  // Per-family probes indexed layer * H + head (as rank_heads returns them);
  // when all three are set they are attached instead of training new ones.
  std::array<const std::vector<ProbeModel>*, 3> probe_sets{};
};

ExpertProfile build_expert(const ActivationStore& store, const HeadRanking& ranking, int k,
                           double alpha, const ModelState& model, Scope scope,
                           const ExpertOptions& options = {});

class ExpertRegistry {
 public:
  void add(ExpertProfile profile);  // replaces any profile of the same scope
  const ExpertProfile* find(Scope scope) const;
  std::vector<const ExpertProfile*> profiles() const;  // general first, then categories
  bool empty() const { return profiles_.empty(); }

  bool operator==(const ExpertRegistry&) const = default;

 private:
  std::map<int, ExpertProfile> profiles_;  // key -1 = general
};

// Keyword router: state words route to FSM, register words to Sequential,
// anything else to Combinational; falls back to general when the matched
// profile is absent.
Category route_category(const TokenSeq& spec);
Scope route(const ExpertRegistry& registry, const TokenSeq& spec);

// Which experts a plan draws from.
enum class PlanTarget : std::uint8_t { kGeneral, kComb, kSeq, kFsm, kMulti };
std::string_view plan_target_name(PlanTarget t);
PlanTarget plan_target_from_name(std::string_view name);
Scope target_scope(PlanTarget t);  // kMulti has no single scope (returns general)

// Single targets copy the profile; kMulti takes the union of the comb, seq and
// fsm profiles, summing and renormalizing theta for heads several share.
// kContract when a required profile is missing.
SteeringPlan make_plan(const ExpertRegistry& registry, PlanTarget target,
                       std::optional<double> alpha, SteeringMode mode);

// Dynamic gate: sigma = 1 exactly when the head's probe ensemble votes 0.
std::uint8_t gate_head(const ExpertHead& head, std::span<const double> z);
// Sigma for each profile head given one position's taps laid out
// [layer][head][d_head].
std::vector<std::uint8_t> dynamic_gate(const ExpertProfile& profile, std::span<const double> taps,
                                       int n_heads, int d_head);
// Gate callback for DecodeSession over the registry's probes for `target`.
DynamicGate make_dynamic_gate(const ExpertRegistry& registry, PlanTarget target);

void save_registry(const ExpertRegistry& registry, const std::filesystem::path& path);
ExpertRegistry load_registry(const std::filesystem::path& path);
// scope,layer,head,val_accuracy,theta_norm
std::string registry_csv(const ExpertRegistry& registry);

}  // namespace meltrtl
