#include "meltrtl/probes.h"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "meltrtl/error.h"
#include "meltrtl/rng.h"

namespace meltrtl {
namespace {

ProbeData blobs(std::uint64_t seed, int n, double sep) {
  Rng rng(seed);
  ProbeData d;
  for (int i = 0; i < n; ++i) {
    const std::uint8_t y = i % 2;
    const double c = y ? sep : -sep;
    d.x.push_back({c + 0.5 * rng.normal(), c + 0.5 * rng.normal()});
    d.y.push_back(y);
  }
  return d;
}

// Four clusters at (+-1, +-1), label = sign(x) == sign(y), mirrored so the
// layout is symmetric under x -> -x and y -> -y.
ProbeData xor_layout(std::uint64_t seed, int per_cluster) {
  Rng rng(seed);
  ProbeData d;
  for (int i = 0; i < per_cluster; ++i) {
    const double ex = 0.2 * rng.normal(), ey = 0.2 * rng.normal();
    for (int sx : {-1, 1})
      for (int sy : {-1, 1}) {
        d.x.push_back({sx * (1.0 + ex), sy * (1.0 + ey)});
        d.y.push_back(sx == sy);
      }
  }
  return d;
}

ProbeData rings(std::uint64_t seed, int n) {
  Rng rng(seed);
  ProbeData d;
  for (int i = 0; i < n; ++i) {
    const std::uint8_t y = i % 2;
    const double r = (y ? 1.0 : 3.0) + 0.3 * rng.normal();
    const double t = 2 * M_PI * rng.uniform();
    d.x.push_back({r * std::cos(t), r * std::sin(t)});
    d.y.push_back(y);
  }
  return d;
}

// Perceptron on a labeled point set: converges iff linearly separable (for
// these tiny inputs within the epoch budget).
bool perceptron_separates(const std::vector<Vec>& pts, const std::vector<int>& labels) {
  double w0 = 0, w1 = 0, b = 0;
  for (int epoch = 0; epoch < 1000; ++epoch) {
    bool clean = true;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const int y = labels[i] ? 1 : -1;
      if (y * (w0 * pts[i][0] + w1 * pts[i][1] + b) <= 0) {
        w0 += y * pts[i][0];
        w1 += y * pts[i][1];
        b += y;
        clean = false;
      }
    }
    if (clean) return true;
  }
  return false;
}

double radius_oracle_accuracy(const ProbeModel& p, const ProbeData& d) {
  std::size_t agree = 0;
  for (std::size_t i = 0; i < d.x.size(); ++i) {
    const bool inner = std::hypot(d.x[i][0], d.x[i][1]) < 2.0;
    agree += predict(p, d.x[i]).cls == static_cast<std::uint8_t>(inner);
  }
  return static_cast<double>(agree) / d.x.size();
}

TEST(LrTest, SeparableBlobs) {
  const ProbeData d = blobs(1, 200, 2.0);
  const ProbeModel p = train_lr(d);
  EXPECT_GE(p.train_accuracy, 0.99);
  EXPECT_GE(accuracy(p, blobs(2, 200, 2.0)), 0.99);
}

TEST(LrTest, XorIsNotLinearlySeparable) {
  const std::vector<Vec> centroids = {{-1, -1}, {-1, 1}, {1, -1}, {1, 1}};
  int separable = 0;
  for (int mask = 0; mask < 16; ++mask) {
    std::vector<int> labels(4);
    for (int i = 0; i < 4; ++i) labels[i] = (mask >> i) & 1;
    separable += perceptron_separates(centroids, labels);
  }
  EXPECT_EQ(separable, 14);  // all but the two XOR labelings
  EXPECT_FALSE(perceptron_separates(centroids, {1, 0, 0, 1}));
  const ProbeModel p = train_lr(xor_layout(3, 50));
  EXPECT_LE(p.train_accuracy, 0.6);
}

TEST(LrTest, DuplicatedSamplesGiveSameDecisionFunction) {
  const ProbeData d = blobs(4, 60, 0.7);
  ProbeData dd = d;
  dd.x.insert(dd.x.end(), d.x.begin(), d.x.end());
  dd.y.insert(dd.y.end(), d.y.begin(), d.y.end());
  const ProbeModel a = train_lr(d), b = train_lr(dd);
  for (std::size_t j = 0; j < a.w.size(); ++j) EXPECT_NEAR(a.w[j], b.w[j], 1e-9);
  EXPECT_NEAR(a.b, b.b, 1e-9);
}

TEST(LrTest, BoundaryScoreAndReferenceEvaluator) {
  const ProbeModel p = train_lr(blobs(5, 80, 1.0));
  // A point on the decision boundary, built in standardized space.
  Vec z = {1.0, 0.0};
  z[1] = -(p.b + p.w[0] * z[0]) / p.w[1];
  const Vec h = {z[0] * p.scale[0] + p.mean[0], z[1] * p.scale[1] + p.mean[1]};
  EXPECT_NEAR(predict(p, h).score, 0.5, 1e-12);
  Rng rng(6);
  for (int i = 0; i < 50; ++i) {
    const Vec q = {3 * rng.normal(), 3 * rng.normal()};
    double s = p.b;
    for (int j = 0; j < 2; ++j) s += p.w[j] * (q[j] - p.mean[j]) / p.scale[j];
    const double ref = 1.0 / (1.0 + std::exp(-s));
    EXPECT_NEAR(predict(p, q).score, ref, 1e-12);
    EXPECT_EQ(predict(p, q).cls, ref >= 0.5);
  }
  EXPECT_THROW(predict(p, Vec{1.0}), Error);
}

TEST(LrTest, SingleLabelRejected) {
  ProbeData d = blobs(7, 10, 1.0);
  for (auto& y : d.y) y = 1;
  for (ProbeFamily f : kAllFamilies) {
    try {
      train_probe(f, d, {});
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kData);
    }
  }
}

TEST(MlpTest, LearnsXor) {
  const ProbeData d = xor_layout(8, 50);
  const ProbeModel p = train_mlp(d, {.seed = 1});
  EXPECT_GE(p.train_accuracy, 0.95);
  for (int sx : {-1, 1})
    for (int sy : {-1, 1})
      EXPECT_EQ(predict(p, Vec{1.0 * sx, 1.0 * sy}).cls, sx == sy) << sx << "," << sy;
}

TEST(MlpTest, LinearBlobs) {
  EXPECT_GE(train_mlp(blobs(9, 200, 2.0), {.seed = 2}).train_accuracy, 0.99);
}

TEST(MlpTest, GradientMatchesFiniteDifferences) {
  Rng rng(10);
  ProbeData d;
  for (int i = 0; i < 12; ++i) {
    d.x.push_back({rng.normal(), rng.normal(), rng.normal()});
    d.y.push_back(i % 2);
  }
  ProbeModel p = train_mlp(d, {.hidden = 5, .max_iter = 3, .seed = 3});
  Vec g;
  mlp_objective(p, d, 0.01, &g);
  Vec num(g.size());
  const double h = 1e-6;
  for (std::size_t k = 0; k < g.size(); ++k) {
    const double w0 = p.mlp[k];
    p.mlp[k] = w0 + h;
    const double up = mlp_objective(p, d, 0.01, nullptr);
    p.mlp[k] = w0 - h;
    const double down = mlp_objective(p, d, 0.01, nullptr);
    p.mlp[k] = w0;
    num[k] = (up - down) / (2 * h);
  }
  double diff = 0, norm = 0;
  for (std::size_t k = 0; k < g.size(); ++k) {
    diff += (g[k] - num[k]) * (g[k] - num[k]);
    norm += num[k] * num[k];
  }
  EXPECT_LE(std::sqrt(diff / norm), 1e-4);
}

TEST(MlpTest, DeterministicPerSeed) {
  const ProbeData d = xor_layout(11, 10);
  EXPECT_EQ(train_mlp(d, {.max_iter = 50, .seed = 4}), train_mlp(d, {.max_iter = 50, .seed = 4}));
  EXPECT_NE(train_mlp(d, {.max_iter = 50, .seed = 4}).mlp,
            train_mlp(d, {.max_iter = 50, .seed = 5}).mlp);
}

TEST(MlpTest, ReferenceEvaluator) {
  const ProbeModel p = train_mlp(xor_layout(12, 10), {.hidden = 7, .max_iter = 200, .seed = 6});
  Rng rng(13);
  for (int i = 0; i < 30; ++i) {
    const Vec q = {2 * rng.normal(), 2 * rng.normal()};
    const Vec x = {(q[0] - p.mean[0]) / p.scale[0], (q[1] - p.mean[1]) / p.scale[1]};
    double z = p.mlp[7 * 2 + 7 + 7];
    for (int k = 0; k < 7; ++k) {
      const double pre = p.mlp[k * 2] * x[0] + p.mlp[k * 2 + 1] * x[1] + p.mlp[14 + k];
      z += p.mlp[21 + k] * std::max(pre, 0.0);
    }
    EXPECT_NEAR(predict(p, q).score, 1.0 / (1.0 + std::exp(-z)), 1e-12);
  }
}

TEST(SvcTest, ConcentricRings) {
  const ProbeData d = rings(14, 200);
  const ProbeModel p = train_svc(d);
  EXPECT_TRUE(p.converged);
  EXPECT_GE(p.train_accuracy, 0.95);
  EXPECT_GE(radius_oracle_accuracy(p, rings(15, 200)), 0.95);
  EXPECT_LE(p.kkt_gap, 1e-3);
  double eq = 0;
  for (std::size_t j = 0; j < p.alpha.size(); ++j) {
    EXPECT_GT(p.alpha[j], 0.0);
    EXPECT_LE(p.alpha[j], p.C);
    eq += p.alpha[j] * p.sv_label[j];
  }
  EXPECT_NEAR(eq, 0.0, 1e-3);
}

TEST(SvcTest, LargeGammaMemorizes) {
  Rng rng(16);
  ProbeData d;
  for (int i = 0; i < 60; ++i) {
    d.x.push_back({rng.normal(), rng.normal(), rng.normal()});
    d.y.push_back(rng.bernoulli(0.5));
  }
  d.y[0] = 0;
  d.y[1] = 1;
  SvcOptions o;
  o.gamma = 1e4;
  o.C = 10;
  EXPECT_EQ(train_svc(d, o).train_accuracy, 1.0);
}

TEST(SvcTest, ReferenceEvaluator) {
  const ProbeModel p = train_svc(rings(17, 60));
  Rng rng(18);
  for (int i = 0; i < 30; ++i) {
    const Vec q = {2 * rng.normal(), 2 * rng.normal()};
    const Vec x = {(q[0] - p.mean[0]) / p.scale[0], (q[1] - p.mean[1]) / p.scale[1]};
    double f = p.bias;
    for (std::size_t j = 0; j < p.support.size(); ++j) {
      const double dx = p.support[j][0] - x[0], dy = p.support[j][1] - x[1];
      f += p.alpha[j] * p.sv_label[j] * std::exp(-p.gamma * (dx * dx + dy * dy));
    }
    EXPECT_NEAR(predict(p, q).score, f, 1e-12);
    EXPECT_EQ(predict(p, q).cls, f >= 0);
  }
}

TEST(ProbeTest, AffineRescalingPreservesClasses) {
  const ProbeData d = xor_layout(19, 15);
  ProbeData s = d;
  const double a[2] = {3.0, 0.25}, c[2] = {-2.0, 7.0};
  for (auto& x : s.x)
    for (int j = 0; j < 2; ++j) x[j] = a[j] * x[j] + c[j];
  ProbeOptions o;
  o.mlp.max_iter = 300;
  Rng rng(20);
  for (ProbeFamily f : kAllFamilies) {
    const ProbeModel p = train_probe(f, d, o), q = train_probe(f, s, o);
    for (int i = 0; i < 40; ++i) {
      const Vec h = {1.5 * rng.normal(), 1.5 * rng.normal()};
      const Vec hs = {a[0] * h[0] + c[0], a[1] * h[1] + c[1]};
      if (std::abs(predict(p, h).score - (f == ProbeFamily::kSvc ? 0.0 : 0.5)) < 1e-6) continue;
      EXPECT_EQ(predict(p, h).cls, predict(q, hs).cls) << family_name(f);
    }
  }
}

TEST(ProbeTest, EnsembleVote) {
  ProbeModel one, zero;
  one.dim = zero.dim = 1;
  one.mean = zero.mean = {0.0};
  one.scale = zero.scale = {1.0};
  one.w = zero.w = {0.0};
  one.b = 5.0;
  zero.b = -5.0;
  const Vec h = {0.3};
  EXPECT_EQ(ensemble_vote(one, one, zero, h), 1);
  EXPECT_EQ(ensemble_vote(zero, one, one, h), 1);
  EXPECT_EQ(ensemble_vote(zero, zero, zero, h), 0);
  EXPECT_EQ(ensemble_vote(one, zero, zero, h), 0);
  // Random probes: the vote always equals one of the individual votes, and is
  // right whenever two voters are right.
  const ProbeData d = blobs(21, 80, 0.6);
  const ProbeModel lr = train_lr(d), mlp = train_mlp(d, {.max_iter = 100}), svc = train_svc(d);
  for (std::size_t i = 0; i < d.x.size(); ++i) {
    const int v = ensemble_vote(lr, mlp, svc, d.x[i]);
    const int a = predict(lr, d.x[i]).cls, b = predict(mlp, d.x[i]).cls, c = predict(svc, d.x[i]).cls;
    EXPECT_TRUE(v == a || v == b || v == c);
    EXPECT_EQ(v, (a + b + c) >= 2);
  }
}

ActivationStore planted_store(std::uint64_t seed, int layer, int head, double shift) {
  Rng rng(seed);
  ActivationStore s(3, 4, 4, "planted");
  for (std::uint32_t id = 0; id < 200; ++id) {
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

TEST(RankTest, PlantedHeadRanksFirst) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const ActivationStore s = planted_store(seed, 2, 1, 1.5);
    for (ProbeFamily f : kAllFamilies) {
      RankOptions o;
      o.split_seed = seed;
      const HeadRanking r = rank_heads(s, f, std::nullopt, o);
      ASSERT_EQ(r.entries.size(), 12u);
      EXPECT_EQ(r.entries[0].layer, 2) << family_name(f);
      EXPECT_EQ(r.entries[0].head, 1) << family_name(f);
      for (std::size_t i = 1; i < r.entries.size(); ++i) {
        const auto& a = r.entries[i - 1];
        const auto& b = r.entries[i];
        EXPECT_TRUE(a.val_accuracy > b.val_accuracy ||
                    (a.val_accuracy == b.val_accuracy &&
                     (a.layer < b.layer || (a.layer == b.layer && a.head < b.head))));
      }
    }
  }
}

TEST(RankTest, TieBreaksByLayerThenHead) {
  // Two identical planted heads produce identical accuracies.
  ActivationStore base = planted_store(30, 1, 3, 2.0);
  ActivationStore s(3, 4, 4, "tie");
  for (int l = 0; l < 3; ++l)
    for (int h = 0; h < 4; ++h)
      for (auto r : base.group(l == 0 && h == 2 ? 1 : l, l == 0 && h == 2 ? 3 : h)) {
        r.layer = static_cast<std::uint16_t>(l);
        r.head = static_cast<std::uint16_t>(h);
        s.add(r);
      }
  const HeadRanking r = rank_heads(s, ProbeFamily::kLr, std::nullopt, {});
  EXPECT_EQ(r.entries[0].val_accuracy, r.entries[1].val_accuracy);
  EXPECT_EQ((HeadId{r.entries[0].layer, r.entries[0].head}), (HeadId{0, 2}));
  EXPECT_EQ((HeadId{r.entries[1].layer, r.entries[1].head}), (HeadId{1, 3}));
}

TEST(RankTest, PermutationInvariantAndDeterministic) {
  const ActivationStore s = planted_store(31, 0, 0, 0.8);
  ActivationStore p(3, 4, 4, "planted");
  Rng rng(5);
  for (int l = 0; l < 3; ++l)
    for (int h = 0; h < 4; ++h) {
      auto g = s.group(l, h);
      rng.shuffle(g);
      for (auto& r : g) p.add(r);
    }
  for (ProbeFamily f : kAllFamilies)
    EXPECT_EQ(rank_heads(s, f, std::nullopt, {}), rank_heads(p, f, std::nullopt, {}));
}

TEST(RankTest, ScopeAndDegenerateHeads) {
  ActivationStore s(1, 2, 2, "deg");
  Rng rng(32);
  for (std::uint32_t id = 0; id < 60; ++id) {
    const std::uint8_t y = id % 2;
    const auto cat = static_cast<Category>((id / 2) % 3);
    s.add({id, 0, 0, y, cat, {1.0, 2.0}});
    s.add({id, 0, 1, y, cat, {rng.normal() + y, rng.normal()}});
  }
  std::vector<ProbeModel> probes;
  const HeadRanking r = rank_heads(s, ProbeFamily::kSvc, Category::kSequential, {}, &probes);
  EXPECT_EQ(r.scope, Category::kSequential);
  ASSERT_EQ(probes.size(), 2u);
  const auto& deg = r.entries[0].head == 0 ? r.entries[0] : r.entries[1];
  EXPECT_TRUE(deg.flagged);
  EXPECT_EQ(deg.val_accuracy, 0.5);
  EXPECT_EQ(ranking_from_probes(probes, ProbeFamily::kSvc, Category::kSequential, 1, 2), r);
}

TEST(RankTest, RankingRebuiltFromSavedProbes) {
  const ActivationStore s = planted_store(35, 0, 3, 1.2);
  for (ProbeFamily f : kAllFamilies) {
    std::vector<ProbeModel> probes;
    RankOptions o;
    o.probe.mlp.max_iter = 50;
    const HeadRanking r = rank_heads(s, f, Category::kFsm, o, &probes);
    std::vector<ProbeBundleEntry> entries;
    for (int l = 0; l < 3; ++l)
      for (int h = 0; h < 4; ++h) entries.push_back({{l, h}, probes[l * 4 + h]});
    const auto path = std::filesystem::temp_directory_path() / "meltrtl_rank_rebuild.bin";
    save_probe_bundle(entries, path);
    std::vector<ProbeModel> back;
    for (const auto& e : load_probe_bundle(path)) back.push_back(e.probe);
    std::filesystem::remove(path);
    EXPECT_EQ(ranking_from_probes(back, f, Category::kFsm, 3, 4), r);
  }
  EXPECT_THROW(ranking_from_probes({}, ProbeFamily::kLr, std::nullopt, 3, 4), Error);
}

TEST(RankTest, SelectTopK) {
  const HeadRanking r = rank_heads(planted_store(33, 1, 1, 1.0), ProbeFamily::kLr, std::nullopt, {});
  EXPECT_EQ(select_top_k(r, 12).size(), 12u);
  const auto top5 = select_top_k(r, 5), top10 = select_top_k(r, 10);
  EXPECT_TRUE(std::equal(top5.begin(), top5.end(), top10.begin()));
  EXPECT_THROW(select_top_k(r, 0), Error);
  EXPECT_THROW(select_top_k(r, 13), Error);
  const std::string csv = ranking_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,head,family,scope,val_accuracy,rank");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 13);
}

TEST(BundleTest, RoundTripBehaviour) {
  const ProbeData d = xor_layout(34, 10);
  std::vector<ProbeBundleEntry> entries;
  int i = 0;
  for (ProbeFamily f : kAllFamilies) {
    ProbeOptions o;
    o.mlp.max_iter = 100;
    entries.push_back({{i, 2 * i}, train_probe(f, d, o)});
    ++i;
  }
  const auto path = std::filesystem::temp_directory_path() / "meltrtl_probe_bundle.bin";
  save_probe_bundle(entries, path);
  const auto back = load_probe_bundle(path);
  EXPECT_EQ(back, entries);
  for (std::size_t k = 0; k < 3; ++k)
    for (const auto& x : d.x)
      EXPECT_EQ(predict(back[k].probe, x).score, predict(entries[k].probe, x).score);
  std::string bytes = read_file_bytes(path);
  bytes[20] ^= 4;
  write_file_bytes(path, bytes);
  EXPECT_THROW(load_probe_bundle(path), Error);
  std::filesystem::remove(path);
}

TEST(ProbeTest, NameParsing) {
  EXPECT_EQ(family_from_name("svc"), ProbeFamily::kSvc);
  EXPECT_THROW(family_from_name("knn"), Error);
  EXPECT_EQ(scope_from_name("general"), std::nullopt);
  EXPECT_EQ(scope_name(Category::kFsm), "fsm");
  EXPECT_EQ(scope_from_name("seq"), Category::kSequential);
  EXPECT_THROW(scope_from_name("Sequential"), Error);
}

}  // namespace
}  // namespace meltrtl
