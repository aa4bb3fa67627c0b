#include "meltrtl/steering.h"

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <memory>

#include "meltrtl/binio.h"
#include "meltrtl/error.h"

namespace meltrtl {
namespace {

constexpr std::string_view kMagic{"MELTEXP\1", 8};
constexpr std::uint8_t kGeneralTag = 255;

int scope_key(Scope s) { return s ? static_cast<int>(*s) : -1; }

const ExpertProfile& need(const ExpertRegistry& r, Scope s) {
  const ExpertProfile* p = r.find(s);
  if (!p) fail(ErrorCode::kContract, "no expert profile for scope " + scope_name(s));
  return *p;
}

}  // namespace

Vec compute_direction(const ActivationStore& store, int layer, int head, const Mat& q,
                      Scope scope) {
  const auto& group = store.group(layer, head);
  const std::string where = "head (" + std::to_string(layer) + ", " + std::to_string(head) +
                            ") scope " + scope_name(scope);
  Vec mean[2];
  int count[2] = {0, 0};
  for (const auto& r : group) {
    if (scope && r.category != *scope) continue;
    Vec& m = mean[r.label];
    if (m.empty()) m.assign(r.vector.size(), 0.0);
    for (std::size_t i = 0; i < r.vector.size(); ++i) m[i] += r.vector[i];
    ++count[r.label];
  }
  if (count[0] == 0 || count[1] == 0)
    fail(ErrorCode::kData, "compute_direction: " + where + " lacks one label");
  require(q.cols() == mean[1].size(), "compute_direction: projection width differs from d_head");
  Vec diff(mean[1].size());
  bool zero = true;
  for (std::size_t i = 0; i < diff.size(); ++i) {
    diff[i] = mean[1][i] / count[1] - mean[0][i] / count[0];
    zero = zero && diff[i] == 0.0;
  }
  if (zero)
    fail(ErrorCode::kData, "compute_direction: " + where + " is degenerate (equal class means)");
  const Vec r = matvec(q, diff);
  if (l2_norm(r) == 0.0)
    fail(ErrorCode::kData, "compute_direction: " + where + " projects to the zero vector");
  return normalized(r);
}

ExpertProfile build_expert(const ActivationStore& store, const HeadRanking& ranking, int k,
                           double alpha, const ModelState& model, Scope scope,
                           const ExpertOptions& options) {
  require(alpha >= 0.0, "build_expert: alpha must be >= 0");
  require(store.d_head() == model.config().d_head(),
          "build_expert: store head width differs from the model's");
  ExpertProfile p;
  p.scope = scope;
  p.family = ranking.family;
  p.k = k;
  p.alpha = alpha;
  if (k == 0) return p;
  const std::vector<HeadId> heads = select_top_k(ranking, k);
  std::optional<std::pair<ActivationStore, ActivationStore>> parts;
  const bool precomputed =
      options.probe_sets[0] && options.probe_sets[1] && options.probe_sets[2];
  if (options.attach_probes && !precomputed)
    parts = split(filter_category(store, scope), options.rank.train_fraction,
                  options.rank.split_seed);
  for (const HeadId& id : heads) {
    ExpertHead e;
    e.head = id;
    try {
      e.theta = compute_direction(store, id.layer, id.head,
                                  model.output_projection(id.layer, id.head), scope);
    } catch (const Error& err) {
      if (err.code() != ErrorCode::kData) throw;
      std::cerr << "build_expert: dropping " << err.what() << "\n";
      continue;
    }
    for (const auto& s : ranking.entries)
      if (s.layer == id.layer && s.head == id.head) e.val_accuracy = s.val_accuracy;
    if (options.attach_probes && precomputed) {
      const std::size_t idx = static_cast<std::size_t>(id.layer) * store.n_heads() + id.head;
      std::array<ProbeModel, 3> pr;
      for (int f = 0; f < 3; ++f) {
        require(idx < options.probe_sets[f]->size(), "build_expert: probe set too small");
        pr[f] = (*options.probe_sets[f])[idx];
      }
      e.probes = std::move(pr);
    } else if (parts) {
      const ProbeData d = to_probe_data(parts->first.group(id.layer, id.head));
      e.probes = std::array<ProbeModel, 3>{train_lr(d, options.rank.probe.lr),
                                           train_mlp(d, options.rank.probe.mlp),
                                           train_svc(d, options.rank.probe.svc)};
    }
    p.heads.push_back(std::move(e));
  }
  if (static_cast<int>(p.heads.size()) < k)
    std::cerr << "build_expert: scope " << scope_name(scope) << " kept " << p.heads.size()
              << " of " << k << " heads\n";
  return p;
}

void ExpertRegistry::add(ExpertProfile profile) {
  const int key = scope_key(profile.scope);
  profiles_.insert_or_assign(key, std::move(profile));
}

const ExpertProfile* ExpertRegistry::find(Scope scope) const {
  const auto it = profiles_.find(scope_key(scope));
  return it == profiles_.end() ? nullptr : &it->second;
}

std::vector<const ExpertProfile*> ExpertRegistry::profiles() const {
  std::vector<const ExpertProfile*> out;
  for (const auto& [key, p] : profiles_) out.push_back(&p);
  return out;
}

Category route_category(const TokenSeq& spec) {
  bool reg = false, state = false;
  for (Token t : spec) {
    state = state || t == Token::kFsm || t == Token::kState || is_state(t);
    reg = reg || t == Token::kSeq || t == Token::kReg || is_register(t);
  }
  if (state) return Category::kFsm;
  if (reg) return Category::kSequential;
  return Category::kCombinational;
}

Scope route(const ExpertRegistry& registry, const TokenSeq& spec) {
  require(!registry.empty(), "route: empty expert registry");
  const Category c = route_category(spec);
  return registry.find(c) ? Scope(c) : Scope(std::nullopt);
}

std::string_view plan_target_name(PlanTarget t) {
  switch (t) {
    case PlanTarget::kGeneral: return "general";
    case PlanTarget::kComb: return "comb";
    case PlanTarget::kSeq: return "seq";
    case PlanTarget::kFsm: return "fsm";
    case PlanTarget::kMulti: return "multi";
  }
  return "?";
}

PlanTarget plan_target_from_name(std::string_view name) {
  for (auto t : {PlanTarget::kGeneral, PlanTarget::kComb, PlanTarget::kSeq, PlanTarget::kFsm,
                 PlanTarget::kMulti})
    if (plan_target_name(t) == name) return t;
  fail(ErrorCode::kConfig, "unknown expert target '" + std::string(name) +
                               "' (expected general, comb, seq, fsm or multi)");
}

Scope target_scope(PlanTarget t) {
  switch (t) {
    case PlanTarget::kComb: return Category::kCombinational;
    case PlanTarget::kSeq: return Category::kSequential;
    case PlanTarget::kFsm: return Category::kFsm;
    default: return std::nullopt;
  }
}

SteeringPlan make_plan(const ExpertRegistry& registry, PlanTarget target,
                       std::optional<double> alpha, SteeringMode mode) {
  SteeringPlan plan;
  plan.mode = mode;
  if (target != PlanTarget::kMulti) {
    const ExpertProfile& p = need(registry, target_scope(target));
    plan.alpha = alpha.value_or(p.alpha);
    for (const auto& h : p.heads) plan.entries.push_back({h.head.layer, h.head.head, h.theta, 1});
    return plan;
  }
  std::map<HeadId, Vec> sum;
  std::optional<double> first_alpha;
  for (Category c : {Category::kCombinational, Category::kSequential, Category::kFsm}) {
    const ExpertProfile& p = need(registry, c);
    if (!first_alpha) first_alpha = p.alpha;
    for (const auto& h : p.heads) {
      auto [it, fresh] = sum.try_emplace(h.head, h.theta);
      if (!fresh)
        for (std::size_t i = 0; i < h.theta.size(); ++i) it->second[i] += h.theta[i];
    }
  }
  plan.alpha = alpha.value_or(*first_alpha);
  for (const auto& [id, v] : sum) {
    if (l2_norm(v) == 0.0) {
      std::cerr << "make_plan: head (" << id.layer << ", " << id.head
                << ") directions cancel; omitted\n";
      continue;
    }
    plan.entries.push_back({id.layer, id.head, normalized(v), 1});
  }
  return plan;
}

std::uint8_t gate_head(const ExpertHead& head, std::span<const double> z) {
  if (!head.probes)
    fail(ErrorCode::kContract, "dynamic gate: head (" + std::to_string(head.head.layer) + ", " +
                                   std::to_string(head.head.head) + ") carries no probes");
  const auto& p = *head.probes;
  return ensemble_vote(p[0], p[1], p[2], z) == 0 ? 1 : 0;
}

std::vector<std::uint8_t> dynamic_gate(const ExpertProfile& profile, std::span<const double> taps,
                                       int n_heads, int d_head) {
  std::vector<std::uint8_t> sigma;
  for (const auto& h : profile.heads) {
    const std::size_t off = (static_cast<std::size_t>(h.head.layer) * n_heads + h.head.head) *
                            static_cast<std::size_t>(d_head);
    require(off + static_cast<std::size_t>(d_head) <= taps.size(),
            "dynamic_gate: taps do not cover the profile's heads");
    sigma.push_back(gate_head(h, taps.subspan(off, static_cast<std::size_t>(d_head))));
  }
  return sigma;
}

DynamicGate make_dynamic_gate(const ExpertRegistry& registry, PlanTarget target) {
  auto lookup = std::make_shared<std::map<HeadId, ExpertHead>>();
  std::vector<Scope> scopes;
  if (target == PlanTarget::kMulti)
    scopes = {Category::kCombinational, Category::kSequential, Category::kFsm};
  else
    scopes = {target_scope(target)};
  for (Scope s : scopes)
    for (const auto& h : need(registry, s).heads) {
      if (!h.probes)
        fail(ErrorCode::kContract, "dynamic mode needs experts built with probes (scope " +
                                       scope_name(s) + ")");
      lookup->try_emplace(h.head, h);
    }
  return [lookup](const PlanEntry& e, std::span<const double> z) -> std::uint8_t {
    const auto it = lookup->find(HeadId{e.layer, e.head});
    require(it != lookup->end(), "dynamic gate: plan head has no expert probes");
    return gate_head(it->second, z);
  };
}

void save_registry(const ExpertRegistry& registry, const std::filesystem::path& path) {
  BinaryWriter w(kMagic, kExpertFormatVersion);
  const auto profiles = registry.profiles();
  w.u32(static_cast<std::uint32_t>(profiles.size()));
  for (const ExpertProfile* p : profiles) {
    w.u8(p->scope ? static_cast<std::uint8_t>(*p->scope) : kGeneralTag);
    w.u8(static_cast<std::uint8_t>(p->family));
    w.u32(static_cast<std::uint32_t>(p->k));
    w.f64(p->alpha);
    const std::size_t d = p->heads.empty() ? 0 : p->heads.front().theta.size();
    w.u32(static_cast<std::uint32_t>(d));
    w.u32(static_cast<std::uint32_t>(p->heads.size()));
    for (const auto& h : p->heads) {
      require(h.theta.size() == d, "save_registry: theta lengths differ within a profile");
      w.u16(static_cast<std::uint16_t>(h.head.layer));
      w.u16(static_cast<std::uint16_t>(h.head.head));
      w.f64(h.val_accuracy);
      w.f64s(h.theta);
      w.u8(h.probes.has_value());
      if (h.probes)
        for (const auto& pr : *h.probes) encode_probe(w, pr);
    }
  }
  std::move(w).write_file(path);
}

ExpertRegistry load_registry(const std::filesystem::path& path) {
  BinaryReader r = BinaryReader::from_file(path, kMagic, kExpertFormatVersion, "expert registry");
  ExpertRegistry reg;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    ExpertProfile p;
    const std::uint8_t tag = r.u8();
    if (tag != kGeneralTag && tag >= kNumCategories)
      fail(ErrorCode::kFormat, "expert registry: bad scope tag " + std::to_string(tag));
    if (tag != kGeneralTag) p.scope = static_cast<Category>(tag);
    const std::uint8_t fam = r.u8();
    if (fam > 2) fail(ErrorCode::kFormat, "expert registry: bad family tag");
    p.family = static_cast<ProbeFamily>(fam);
    p.k = static_cast<int>(r.u32());
    p.alpha = r.f64();
    const std::uint32_t d = r.u32(), nh = r.u32();
    if (nh > 0 && (d == 0 || d > r.remaining() / 8))
      fail(ErrorCode::kFormat, "expert registry: bad theta width");
    for (std::uint32_t j = 0; j < nh; ++j) {
      ExpertHead h;
      h.head.layer = r.u16();
      h.head.head = r.u16();
      h.val_accuracy = r.f64();
      h.theta.resize(d);
      r.f64s(h.theta);
      if (std::abs(l2_norm(h.theta) - 1.0) > 1e-9)
        fail(ErrorCode::kFormat, "expert registry: theta is not unit norm");
      if (r.u8()) {
        std::array<ProbeModel, 3> pr;
        for (auto& m : pr) m = decode_probe(r);
        h.probes = std::move(pr);
      }
      p.heads.push_back(std::move(h));
    }
    reg.add(std::move(p));
  }
  r.expect_end();
  return reg;
}

std::string registry_csv(const ExpertRegistry& registry) {
  std::string out = "scope,layer,head,val_accuracy,theta_norm\n";
  char buf[160];
  for (const ExpertProfile* p : registry.profiles())
    for (const auto& h : p->heads) {
      std::snprintf(buf, sizeof buf, "%s,%d,%d,%.6f,%.12f\n", scope_name(p->scope).c_str(),
                    h.head.layer, h.head.head, h.val_accuracy, l2_norm(h.theta));
      out += buf;
    }
  return out;
}

}  // namespace meltrtl
