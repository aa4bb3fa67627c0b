#include "meltrtl/steering.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "meltrtl/binio.h"
#include "meltrtl/error.h"
#include "meltrtl/rng.h"

namespace meltrtl {
namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 3;
  c.n_heads = 4;
  c.d_model = 16;
  c.max_context = 32;
  c.seed = 11;
  return c;
}

// Label-dependent shift of +-shift on coordinate 1 of one head; categories cycle.
ActivationStore planted_store(std::uint64_t seed, int layer, int head, double shift) {
  Rng rng(seed);
  ActivationStore s(3, 4, 4, "planted");
  for (std::uint32_t id = 0; id < 240; ++id) {
    const std::uint8_t y = id % 2;
    const auto cat = static_cast<Category>((id / 2) % 3);
    for (int l = 0; l < 3; ++l)
      for (int h = 0; h < 4; ++h) {
        Vec v(4);
        for (double& x : v) x = rng.normal();
        if (l == layer && h == head) v[1] += y ? shift : -shift;
        s.add({id, static_cast<std::uint16_t>(l), static_cast<std::uint16_t>(h), y, cat, v});
      }
  }
  return s;
}

Vec unit(int d, int i) {
  Vec v(d, 0.0);
  v[i] = 1.0;
  return v;
}

Vec reference_direction(const std::vector<ActivationRecord>& g, const Mat& q, Scope scope) {
  const std::size_t dh = g.front().vector.size();
  Vec s1(dh, 0.0), s0(dh, 0.0);
  double n1 = 0, n0 = 0;
  for (const auto& r : g) {
    if (scope && r.category != *scope) continue;
    for (std::size_t i = 0; i < dh; ++i) (r.label ? s1 : s0)[i] += r.vector[i];
    (r.label ? n1 : n0) += 1;
  }
  Vec out(q.rows(), 0.0);
  for (std::size_t row = 0; row < q.rows(); ++row)
    for (std::size_t i = 0; i < dh; ++i) out[row] += q(row, i) * (s1[i] / n1 - s0[i] / n0);
  double n = 0;
  for (double x : out) n += x * x;
  for (double& x : out) x /= std::sqrt(n);
  return out;
}

double cosine(const Vec& a, const Vec& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

TEST(DirectionTest, PlantedShiftMatchesReference) {
  const ModelState m = ModelState::initialize(tiny_config());
  const ActivationStore s = planted_store(1, 2, 1, 3.0);
  const Mat q = m.output_projection(2, 1);
  for (Scope scope : {Scope{}, Scope{Category::kSequential}}) {
    const Vec theta = compute_direction(s, 2, 1, q, scope);
    const Vec ref = reference_direction(s.group(2, 1), q, scope);
    ASSERT_EQ(theta.size(), 16u);
    EXPECT_NEAR(l2_norm(theta), 1.0, 1e-12);
    for (std::size_t i = 0; i < theta.size(); ++i) EXPECT_NEAR(theta[i], ref[i], 1e-12);
    EXPECT_GT(cosine(theta, matvec(q, unit(4, 1))), 0.97);
  }
}

TEST(DirectionTest, DegenerateAndSingleLabelAreDataErrors) {
  const ModelState m = ModelState::initialize(tiny_config());
  ActivationStore s(3, 4, 4, "flat");
  for (std::uint32_t id = 0; id < 20; ++id)
    s.add({id, 0, 0, static_cast<std::uint8_t>(id % 2), Category::kCombinational, Vec(4, 0.5)});
  try {
    compute_direction(s, 0, 0, m.output_projection(0, 0), std::nullopt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kData);
    EXPECT_NE(std::string(e.what()).find("degenerate"), std::string::npos);
  }
  try {
    compute_direction(s, 0, 0, m.output_projection(0, 0), Category::kFsm);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kData);
  }
}

TEST(ExpertTest, TopKHeadsInRankOrderWithUnitDirections) {
  const ModelState m = ModelState::initialize(tiny_config());
  const ActivationStore s = planted_store(2, 1, 3, 2.0);
  const HeadRanking r = rank_heads(s, ProbeFamily::kLr, std::nullopt, {});
  const ExpertProfile p = build_expert(s, r, 4, 2.5, m, std::nullopt);
  const auto ids = select_top_k(r, 4);
  ASSERT_EQ(p.heads.size(), 4u);
  EXPECT_EQ(p.k, 4);
  EXPECT_EQ(p.alpha, 2.5);
  EXPECT_EQ(p.heads[0].head, (HeadId{1, 3}));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(p.heads[i].head, ids[i]);
    EXPECT_EQ(p.heads[i].val_accuracy, r.entries[i].val_accuracy);
    EXPECT_NEAR(l2_norm(p.heads[i].theta), 1.0, 1e-12);
    EXPECT_FALSE(p.heads[i].probes.has_value());
  }
  EXPECT_EQ(p, build_expert(s, r, 4, 2.5, m, std::nullopt));
}

TEST(ExpertTest, ZeroKGivesEmptyProfile) {
  const ModelState m = ModelState::initialize(tiny_config());
  const ActivationStore s = planted_store(3, 0, 0, 1.0);
  const HeadRanking r = rank_heads(s, ProbeFamily::kLr, std::nullopt, {});
  const ExpertProfile p = build_expert(s, r, 0, 1.0, m, std::nullopt);
  EXPECT_TRUE(p.heads.empty());
  ExpertRegistry reg;
  reg.add(p);
  const SteeringPlan plan = make_plan(reg, PlanTarget::kGeneral, std::nullopt, SteeringMode::kStatic);
  EXPECT_TRUE(plan.entries.empty());
  EXPECT_THROW(build_expert(s, r, 13, 1.0, m, std::nullopt), Error);
}

TEST(RouterTest, AgreesWithGeneratorCategories) {
  const DatasetManifest prompts = generate_prompt_set(21, 600, 0);
  int agree = 0;
  for (const auto& smp : prompts.samples) agree += route_category(smp.spec) == smp.category;
  EXPECT_GE(agree, 0.99 * prompts.samples.size());

  ExpertRegistry reg;
  reg.add({std::nullopt, ProbeFamily::kLr, 0, 1.0, {}});
  reg.add({Category::kSequential, ProbeFamily::kLr, 0, 1.0, {}});
  for (const auto& smp : prompts.samples) {
    const Scope s = route(reg, smp.spec);
    if (route_category(smp.spec) == Category::kSequential)
      EXPECT_EQ(s, Scope(Category::kSequential));
    else
      EXPECT_EQ(s, Scope{});
  }
}

ExpertProfile manual_profile(Scope scope, const std::vector<HeadId>& heads, int axis0,
                             double alpha) {
  ExpertProfile p;
  p.scope = scope;
  p.k = static_cast<int>(heads.size());
  p.alpha = alpha;
  for (std::size_t i = 0; i < heads.size(); ++i)
    p.heads.push_back({heads[i], unit(16, (axis0 + static_cast<int>(i)) % 16), 0.8, {}});
  return p;
}

TEST(PlanTest, MultiUnionOfDisjointExpertsKeepsEveryHead) {
  ExpertRegistry reg;
  const Category cats[] = {Category::kCombinational, Category::kSequential, Category::kFsm};
  for (int e = 0; e < 3; ++e) {
    std::vector<HeadId> ids;
    for (int i = 0; i < 15; ++i) ids.push_back({(e * 15 + i) / 8, (e * 15 + i) % 8});
    reg.add(manual_profile(cats[e], ids, e, 1.0));
  }
  const SteeringPlan plan = make_plan(reg, PlanTarget::kMulti, 3.0, SteeringMode::kStatic);
  EXPECT_EQ(plan.entries.size(), 45u);
  EXPECT_EQ(plan.alpha, 3.0);
  for (std::size_t i = 1; i < plan.entries.size(); ++i)
    EXPECT_LT((HeadId{plan.entries[i - 1].layer, plan.entries[i - 1].head}),
              (HeadId{plan.entries[i].layer, plan.entries[i].head}));
  EXPECT_EQ(make_plan(reg, PlanTarget::kSeq, std::nullopt, SteeringMode::kStatic).entries.size(),
            15u);
}

TEST(PlanTest, OverlappingHeadBecomesOneNormalizedEntry) {
  ExpertRegistry reg;
  reg.add(manual_profile(Category::kCombinational, {{0, 0}, {1, 1}}, 0, 2.0));
  reg.add(manual_profile(Category::kSequential, {{1, 1}}, 5, 4.0));
  reg.add(manual_profile(Category::kFsm, {{2, 3}}, 7, 4.0));
  const SteeringPlan plan = make_plan(reg, PlanTarget::kMulti, std::nullopt, SteeringMode::kDynamic);
  ASSERT_EQ(plan.entries.size(), 3u);
  EXPECT_EQ(plan.alpha, 2.0);
  EXPECT_EQ(plan.mode, SteeringMode::kDynamic);
  const PlanEntry& e = plan.entries[1];
  EXPECT_EQ((HeadId{e.layer, e.head}), (HeadId{1, 1}));
  EXPECT_NEAR(e.theta[1], 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(e.theta[5], 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NO_THROW(plan.validate(tiny_config()));
}

TEST(PlanTest, MissingProfileAndNames) {
  ExpertRegistry reg;
  reg.add(manual_profile(std::nullopt, {{0, 0}}, 0, 1.0));
  try {
    make_plan(reg, PlanTarget::kMulti, std::nullopt, SteeringMode::kStatic);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kContract);
  }
  EXPECT_THROW(make_plan(reg, PlanTarget::kFsm, std::nullopt, SteeringMode::kStatic), Error);
  const SteeringPlan p = make_plan(reg, PlanTarget::kGeneral, 0.5, SteeringMode::kStatic);
  EXPECT_EQ(p.alpha, 0.5);
  for (auto t : {PlanTarget::kGeneral, PlanTarget::kComb, PlanTarget::kSeq, PlanTarget::kFsm,
                 PlanTarget::kMulti})
    EXPECT_EQ(plan_target_from_name(plan_target_name(t)), t);
  try {
    plan_target_from_name("all");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
  }
}

TEST(GateTest, ProbesDecideSigma) {
  const ModelState m = ModelState::initialize(tiny_config());
  const ActivationStore s = planted_store(4, 0, 2, 4.0);
  const HeadRanking r = rank_heads(s, ProbeFamily::kLr, std::nullopt, {});
  ExpertOptions o;
  o.attach_probes = true;
  const ExpertProfile p = build_expert(s, r, 1, 1.0, m, std::nullopt, o);
  ASSERT_EQ(p.heads.size(), 1u);
  ASSERT_TRUE(p.heads[0].probes.has_value());
  const Vec correct = {0.0, 4.0, 0.0, 0.0};
  const Vec incorrect = {0.0, -4.0, 0.0, 0.0};
  EXPECT_EQ(gate_head(p.heads[0], correct), 0);
  EXPECT_EQ(gate_head(p.heads[0], incorrect), 1);

  Vec taps(3 * 4 * 4, 0.0);
  std::copy(incorrect.begin(), incorrect.end(), taps.begin() + 2 * 4);
  EXPECT_EQ(dynamic_gate(p, taps, 4, 4), std::vector<std::uint8_t>{1});
  std::copy(correct.begin(), correct.end(), taps.begin() + 2 * 4);
  EXPECT_EQ(dynamic_gate(p, taps, 4, 4), std::vector<std::uint8_t>{0});

  ExpertRegistry reg;
  reg.add(p);
  const DynamicGate gate = make_dynamic_gate(reg, PlanTarget::kGeneral);
  const PlanEntry entry{0, 2, p.heads[0].theta, 1};
  EXPECT_EQ(gate(entry, correct), 0);
  EXPECT_EQ(gate(entry, incorrect), 1);
}

TEST(GateTest, ClosedGateLeavesGenerationUnchanged) {
  const ModelState m = ModelState::initialize(tiny_config());
  ExpertRegistry reg;
  reg.add(manual_profile(std::nullopt, {{0, 1}, {2, 3}}, 0, 50.0));
  const SteeringPlan plan = make_plan(reg, PlanTarget::kGeneral, std::nullopt, SteeringMode::kDynamic);
  const TokenSeq prompt = make_prompt(generate_prompt_set(5, 1, 0).samples[0].spec);
  DecodeOptions o;
  o.max_new = 8;
  const DynamicGate closed = [](const PlanEntry&, std::span<const double>) -> std::uint8_t {
    return 0;
  };
  const DynamicGate open = [](const PlanEntry&, std::span<const double>) -> std::uint8_t {
    return 1;
  };
  const Generation base = generate(m, prompt, nullptr, o);
  EXPECT_EQ(generate(m, prompt, &plan, o, closed).tokens, base.tokens);
  const ForwardTrace a = forward_steered(m, prompt, plan, -1, open);
  const ForwardTrace b = forward(m, prompt);
  EXPECT_NE(a.logits, b.logits);
  EXPECT_THROW(make_dynamic_gate(reg, PlanTarget::kGeneral), Error);
}

TEST(RegistryTest, RoundTripCsvAndCorruption) {
  const ModelState m = ModelState::initialize(tiny_config());
  const ActivationStore s = planted_store(6, 1, 0, 2.0);
  ExpertRegistry reg;
  ExpertOptions o;
  o.attach_probes = true;
  for (Scope scope : {Scope{}, Scope{Category::kCombinational}, Scope{Category::kFsm}}) {
    const HeadRanking r = rank_heads(s, ProbeFamily::kMlp, scope, {});
    reg.add(build_expert(s, r, 2, 1.5, m, scope, o));
  }
  const auto path = std::filesystem::temp_directory_path() / "steering_test_registry.bin";
  save_registry(reg, path);
  EXPECT_EQ(load_registry(path), reg);

  const std::string csv = registry_csv(reg);
  EXPECT_EQ(csv.rfind("scope,layer,head,val_accuracy,theta_norm\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  EXPECT_NE(csv.find("general,"), std::string::npos);
  EXPECT_NE(csv.find("fsm,"), std::string::npos);

  std::string bytes = read_file_bytes(path);
  bytes[bytes.size() / 2] ^= 0x40;
  write_file_bytes(path, bytes);
  try {
    load_registry(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kFormat);
  }
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace meltrtl
