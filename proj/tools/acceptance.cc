// meltrtl_acceptance: checks the ten acceptance criteria and prints one
// PASS/FAIL line per criterion. Trained models, probes and grid journals of
// the default pipeline are cached per seed under --cache and reused.

#include <CLI11.hpp>
#include <zlib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "meltrtl/binio.h"
#include "meltrtl/config.h"
#include "meltrtl/corpus.h"
#include "meltrtl/error.h"
#include "meltrtl/evalbench.h"
#include "meltrtl/harvest.h"
#include "meltrtl/model_io.h"
#include "meltrtl/numerics.h"
#include "meltrtl/probes.h"
#include "meltrtl/rng.h"
#include "meltrtl/steering.h"
#include "meltrtl/trainer.h"

namespace fs = std::filesystem;
using namespace meltrtl;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void log(const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); }

// ---------------------------------------------------------------------------
// Default pipeline for one seed, cached under <cache>/seed<s>/.

struct SeedRun {
  RunConfig cfg;
  fs::path dir;
  std::unique_ptr<ModelState> model;
  DatasetManifest corpus, eval, val;
  std::vector<std::uint32_t> training_ids;
  std::unique_ptr<ExpertBank> bank;
};

std::unique_ptr<SeedRun> load_seed(const fs::path& cache, int seed) {
  auto run = std::make_unique<SeedRun>();
  run->cfg.set("seed", std::to_string(seed));
  run->cfg.validate();
  const RunConfig& cfg = run->cfg;
  run->dir = cache / ("seed" + std::to_string(seed));
  fs::create_directories(run->dir);
  const fs::path model_path = run->dir / "model.bin";
  const ModelConfig mc = cfg.model();
  if (fs::exists(model_path)) {
    run->model = std::make_unique<ModelState>(load_model(model_path, &mc));
  } else {
    log(fmt("seed %d: training language model", seed));
    const DatasetManifest pre = generate_pretraining_corpus(cfg.lm_corpus_seed(), cfg.lm_corpus_size());
    TrainOptions o = cfg.train();
    o.on_step = [seed](int step, double loss) {
      if (step % 100 == 0) log(fmt("seed %d: step %d loss %.4f", seed, step, loss));
    };
    run->model = std::make_unique<ModelState>(train(mc, training_examples(pre), o));
    save_model(*run->model, model_path);
  }
  run->corpus =
      generate_corpus_sized(cfg.corpus_seed(), split_total(cfg.corpus_size()), cfg.buggy_fraction());
  run->eval = generate_prompt_set(cfg.eval_seed(), cfg.eval_size(), kEvalIdBase);
  run->val = generate_prompt_set(cfg.val_seed(), cfg.val_size(), kValIdBase);
  for (const auto& s : run->corpus.samples) run->training_ids.push_back(s.id);
  const ActivationStore store = harvest(*run->model, run->corpus, cfg.policy());
  const fs::path probes = run->dir / "probes";
  if (fs::exists(probes)) {
    run->bank = std::make_unique<ExpertBank>(ExpertBank::load(store, *run->model, probes));
  } else {
    log(fmt("seed %d: training probes", seed));
    run->bank = std::make_unique<ExpertBank>(store, *run->model, cfg.rank());
    fs::create_directories(probes);
    run->bank->save_probes(probes);
  }
  return run;
}

GridDefinition grid_for(ExpertMode mode) {
  GridDefinition g = default_grid();
  g.modes = {mode};
  return g;
}

// Validation-set grid for one mode; resumes from the cached journal.
std::vector<ExperimentResult> val_grid(const SeedRun& run, ExpertMode mode, int workers) {
  GridOptions o;
  o.workers = workers;
  o.work_dir = run.dir / ("grid_" + std::string(expert_mode_name(mode)));
  o.resume = true;
  o.eval = run.cfg.eval();
  o.training_ids = run.training_ids;
  std::size_t done = 0;
  const std::size_t total = grid_for(mode).size() + 1;
  o.on_cell = [&](const ExperimentResult& r, bool resumed) {
    ++done;
    if (!resumed && (done % 25 == 0 || done == total))
      log(fmt("  %s grid %zu/%zu (%s)", std::string(expert_mode_name(mode)).c_str(), done, total,
              r.spec.key().c_str()));
  };
  const GridOutcome out = run_grid(*run.model, *run.bank, run.val, grid_for(mode), o);
  if (!out.failures.empty()) fail(ErrorCode::kData, "grid cell failed: " + out.failures.front());
  return out.results;
}

// Highest functional score, earliest cell in grid order on ties.
const ExperimentResult& best_cell(const std::vector<ExperimentResult>& results) {
  const ExperimentResult* best = nullptr;
  for (const auto& r : results)
    if (r.spec.mode != ExpertMode::kBase && (!best || r.func_pct > best->func_pct)) best = &r;
  require(best != nullptr, "best_cell: no steered cells");
  return *best;
}

struct SeedOutcome {
  int seed = 0;
  ExperimentResult base, single, multi;  // on the held-out eval set
  ExperimentSpec single_spec, multi_spec;
  std::vector<ExperimentResult> multi_grid;  // validation grid
};

std::map<int, SeedOutcome>& outcome_cache() {
  static std::map<int, SeedOutcome> m;
  return m;
}
std::map<int, std::unique_ptr<SeedRun>>& run_cache() {
  static std::map<int, std::unique_ptr<SeedRun>> m;
  return m;
}

SeedRun& seed_run(const fs::path& cache, int seed) {
  auto& m = run_cache();
  if (!m.count(seed)) m[seed] = load_seed(cache, seed);
  return *m[seed];
}

const SeedOutcome& seed_outcome(const fs::path& cache, int seed, int workers) {
  auto& m = outcome_cache();
  if (m.count(seed)) return m[seed];
  SeedRun& run = seed_run(cache, seed);
  SeedOutcome o;
  o.seed = seed;
  log(fmt("seed %d: validation grids", seed));
  o.multi_grid = val_grid(run, ExpertMode::kMulti, workers);
  const std::vector<ExperimentResult> general = val_grid(run, ExpertMode::kGeneral, workers);
  o.multi_spec = best_cell(o.multi_grid).spec;
  o.single_spec = best_cell(general).spec;
  const EvalOptions eo = run.cfg.eval();
  ExperimentSpec base_spec;
  o.base = run_cell(*run.model, *run.bank, run.eval, base_spec, eo, run.training_ids);
  o.single = run_cell(*run.model, *run.bank, run.eval, o.single_spec, eo, run.training_ids);
  o.multi = run_cell(*run.model, *run.bank, run.eval, o.multi_spec, eo, run.training_ids);
  m[seed] = o;
  return m[seed];
}

// ---------------------------------------------------------------------------
// Criterion 1: alpha = 0 and empty plans leave greedy generation unchanged.

Verdict criterion1(const fs::path& cache) {
  SeedRun& run = seed_run(cache, 0);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<const Sample*> prompts;
  for (const auto& s : run.eval.samples) prompts.push_back(&s);
  for (const auto& s : run.val.samples) prompts.push_back(&s);
  const ExpertRegistry reg = run.bank->registry(ProbeFamily::kSvc, 15, 3.0, true);
  const SteeringPlan zero = make_plan(reg, PlanTarget::kMulti, 0.0, SteeringMode::kStatic);
  const SteeringPlan zero_dyn = make_plan(reg, PlanTarget::kMulti, 0.0, SteeringMode::kDynamic);
  const DynamicGate gate = make_dynamic_gate(reg, PlanTarget::kMulti);
  const SteeringPlan empty{{}, 3.0, SteeringMode::kStatic};
  int mismatches = 0, variants = 0;
  for (SteerScope scope : {SteerScope::kGenerated, SteerScope::kAll}) {
    DecodeOptions d = run.cfg.eval().decode;
    d.scope = scope;
    for (const Sample* s : prompts) {
      const TokenSeq prompt = make_prompt(s->spec);
      const TokenSeq base = generate(*run.model, prompt, nullptr, d).tokens;
      mismatches += generate(*run.model, prompt, &zero, d).tokens != base;
      mismatches += generate(*run.model, prompt, &zero_dyn, d, gate).tokens != base;
      mismatches += generate(*run.model, prompt, &empty, d).tokens != base;
    }
    variants += 3;
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && prompts.size() >= 200 && secs < 60.0,
          fmt("%zu held-out prompts x %d steered variants, %d token mismatches, %.1f s (limit 60)",
              prompts.size(), variants, mismatches, secs)};
}

// ---------------------------------------------------------------------------
// Criterion 2: single-head injection has norm alpha and stays local.

Verdict criterion2() {
  Rng rng(2024);
  int bad = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    ModelConfig c;
    c.n_layers = 1 + static_cast<int>(rng.below(4));
    c.n_heads = 1 << rng.below(3);
    c.d_model = c.n_heads * (2 + static_cast<int>(rng.below(7)));
    c.max_context = 16;
    c.seed = rng.below(1u << 30);
    const ModelState m = ModelState::initialize(c);
    const int T = 3 + static_cast<int>(rng.below(10));
    TokenSeq toks;
    for (int i = 0; i < T; ++i) toks.push_back(static_cast<Token>(rng.below(kVocabSize)));
    Vec theta(static_cast<std::size_t>(c.d_model));
    for (double& x : theta) x = rng.normal();
    theta = normalized(theta);
    const int layer = static_cast<int>(rng.below(c.n_layers));
    const int head = static_cast<int>(rng.below(c.n_heads));
    const double alpha = 0.1 + 4.9 * rng.uniform();
    const int steer_at = T - 1;
    SteeringPlan plan{{{layer, head, theta, 1}}, alpha, SteeringMode::kStatic};
    const ForwardTrace base = forward(m, toks);
    const ForwardTrace tr = forward_steered(m, toks, plan, steer_at);
    bool ok = true;
    for (int t = 0; t < T; ++t)
      for (int l = 0; l < c.n_layers; ++l) {
        const double n = l2_norm(tr.injected_at(t, l));
        if (t == steer_at && l == layer) {
          worst = std::max(worst, std::abs(n - alpha));
          ok &= std::abs(n - alpha) <= 1e-9;
          const auto a = tr.residual_attn(t, l), b = base.residual_attn(t, l);
          double dn = 0.0;
          for (int j = 0; j < c.d_model; ++j) dn += (a[j] - b[j]) * (a[j] - b[j]);
          ok &= std::abs(std::sqrt(dn) - alpha) <= 1e-9;
        } else {
          ok &= n == 0.0;
        }
      }
    // Other positions: every layer's residual and the logits are untouched.
    for (int t = 0; t < T - 1; ++t) {
      for (int l = 0; l <= c.n_layers; ++l) {
        const auto a = tr.residual_in(t, l), b = base.residual_in(t, l);
        ok &= std::equal(a.begin(), a.end(), b.begin());
      }
      const auto a = tr.logits_at(t), b = base.logits_at(t);
      ok &= std::equal(a.begin(), a.end(), b.begin());
    }
    // Layers up to the injection point at the steered position are untouched.
    for (int l = 0; l <= layer; ++l) {
      const auto a = tr.residual_in(steer_at, l), b = base.residual_in(steer_at, l);
      ok &= std::equal(a.begin(), a.end(), b.begin());
    }
    bad += !ok;
  }
  return {bad == 0, fmt("50 random configurations, %d failing, max | |delta| - alpha | = %.2e "
                        "(limit 1e-9)",
                        bad, worst)};
}

// ---------------------------------------------------------------------------
// Criterion 3: finite-difference gradient checks.

double rel_error(const std::vector<double>& g, const std::vector<double>& num, std::size_t lo,
                 std::size_t hi) {
  double diff = 0.0, norm = 0.0;
  for (std::size_t i = lo; i < hi; ++i) {
    diff += (g[i] - num[i]) * (g[i] - num[i]);
    norm += num[i] * num[i];
  }
  return norm > 0 ? std::sqrt(diff / norm) : std::sqrt(diff);
}

Verdict criterion3() {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.max_context = 16;
  c.seed = 3;
  ModelState m = ModelState::initialize(c);
  Rng rng(33);
  for (double& w : m.params()) w += 0.05 * rng.normal();
  std::vector<TrainingExample> batch;
  for (int i = 0; i < 3; ++i) {
    TrainingExample ex;
    for (int j = 0; j < 3 + i; ++j) ex.prompt.push_back(static_cast<Token>(rng.below(kVocabSize)));
    for (int j = 0; j < 4; ++j) ex.target.push_back(static_cast<Token>(rng.below(kVocabSize)));
    batch.push_back(ex);
  }
  std::vector<const TrainingExample*> ptrs;
  for (const auto& e : batch) ptrs.push_back(&e);
  std::vector<double> grad;
  loss_and_grad(m, ptrs, &grad);
  std::vector<double> num(grad.size());
  const double h = 1e-5;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double w0 = m.params()[i];
    m.params()[i] = w0 + h;
    const double up = loss_and_grad(m, ptrs, nullptr);
    m.params()[i] = w0 - h;
    const double down = loss_and_grad(m, ptrs, nullptr);
    m.params()[i] = w0;
    num[i] = (up - down) / (2 * h);
  }
  double lm_worst = 0.0;
  for (const auto& b : m.layout().blocks())
    lm_worst = std::max(lm_worst, rel_error(grad, num, b.offset, b.offset + b.size));

  ProbeData d;
  for (int i = 0; i < 16; ++i) {
    d.x.push_back({rng.normal(), rng.normal(), rng.normal()});
    d.y.push_back(static_cast<std::uint8_t>(i % 2));
  }
  ProbeModel p = train_mlp(d, {.hidden = 6, .max_iter = 5, .seed = 4});
  Vec pg;
  mlp_objective(p, d, 0.01, &pg);
  std::vector<double> pnum(pg.size());
  const double hp = 1e-6;
  for (std::size_t k = 0; k < pg.size(); ++k) {
    const double w0 = p.mlp[k];
    p.mlp[k] = w0 + hp;
    const double up = mlp_objective(p, d, 0.01, nullptr);
    p.mlp[k] = w0 - hp;
    const double down = mlp_objective(p, d, 0.01, nullptr);
    p.mlp[k] = w0;
    pnum[k] = (up - down) / (2 * hp);
  }
  const std::vector<double> pgv(pg.begin(), pg.end());
  const double mlp_err = rel_error(pgv, pnum, 0, pgv.size());
  const double secs = seconds_since(t0);
  const std::size_t n_params = m.params().size();
  return {lm_worst <= 1e-4 && mlp_err <= 1e-4 && n_params <= 5000 && secs < 120.0,
          fmt("LM (%zu params) worst per-block rel err %.2e, MLP probe (%zu params) %.2e "
              "(limit 1e-4), %.1f s",
              n_params, lm_worst, pgv.size(), mlp_err, secs)};
}

// ---------------------------------------------------------------------------
// Criterion 4: probe oracle suite.

ProbeData blobs(std::uint64_t seed, int n) {
  Rng rng(seed);
  ProbeData d;
  for (int i = 0; i < n; ++i) {
    const std::uint8_t y = i % 2;
    const double c = y ? 2.0 : -2.0;
    d.x.push_back({c + 0.5 * rng.normal(), c + 0.5 * rng.normal()});
    d.y.push_back(y);
  }
  return d;
}

ProbeData xor_layout(std::uint64_t seed, int per_cluster) {
  Rng rng(seed);
  ProbeData d;
  for (int i = 0; i < per_cluster; ++i)
    for (int sx : {-1, 1})
      for (int sy : {-1, 1}) {
        d.x.push_back({sx * (1.0 + 0.2 * rng.normal()), sy * (1.0 + 0.2 * rng.normal())});
        d.y.push_back(sx == sy);
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

// Bayes rule for the symmetric blobs: the sign of x0 + x1.
double blob_oracle(const ProbeModel& p, const ProbeData& d) {
  int agree = 0;
  for (std::size_t i = 0; i < d.x.size(); ++i)
    agree += predict(p, d.x[i]).cls == (d.x[i][0] + d.x[i][1] > 0);
  return static_cast<double>(agree) / d.x.size();
}

// Quadrant rule for XOR and radius threshold for the rings.
double xor_oracle(const ProbeModel& p, const ProbeData& d) {
  int agree = 0;
  for (std::size_t i = 0; i < d.x.size(); ++i)
    agree += predict(p, d.x[i]).cls == ((d.x[i][0] > 0) == (d.x[i][1] > 0));
  return static_cast<double>(agree) / d.x.size();
}

double ring_oracle(const ProbeModel& p, const ProbeData& d) {
  int agree = 0;
  for (std::size_t i = 0; i < d.x.size(); ++i)
    agree += predict(p, d.x[i]).cls == (std::hypot(d.x[i][0], d.x[i][1]) < 2.0);
  return static_cast<double>(agree) / d.x.size();
}

Verdict criterion4() {
  const auto t0 = std::chrono::steady_clock::now();
  const ProbeModel lr_blobs = train_lr(blobs(41, 200));
  const double a_lr_blobs = accuracy(lr_blobs, blobs(42, 400));
  const double o_lr_blobs = blob_oracle(lr_blobs, blobs(42, 400));
  const ProbeModel lr_xor = train_lr(xor_layout(43, 50));
  const double a_lr_xor = accuracy(lr_xor, xor_layout(44, 100));
  const ProbeModel mlp_xor = train_mlp(xor_layout(43, 50), {.seed = 1});
  const double a_mlp_xor = accuracy(mlp_xor, xor_layout(44, 100));
  const double o_mlp_xor = xor_oracle(mlp_xor, xor_layout(44, 100));
  const ProbeModel svc = train_svc(rings(45, 200));
  const double a_svc = accuracy(svc, rings(46, 400));
  const double o_svc = ring_oracle(svc, rings(46, 400));
  const double secs = seconds_since(t0);
  const bool pass = a_lr_blobs >= 0.99 && o_lr_blobs >= 0.99 && a_lr_xor <= 0.60 &&
                    a_mlp_xor >= 0.95 && o_mlp_xor >= 0.95 && a_svc >= 0.95 && o_svc >= 0.95 &&
                    svc.kkt_gap <= 1e-3 && secs < 120.0;
  return {pass, fmt("LR blobs %.3f (Bayes agreement %.3f) >= 0.99, LR XOR %.3f <= 0.60, MLP XOR "
                    "%.3f (quadrant agreement %.3f) >= 0.95, SVC rings %.3f (radius agreement "
                    "%.3f) >= 0.95 with KKT gap %.1e <= 1e-3, %.1f s",
                    a_lr_blobs, o_lr_blobs, a_lr_xor, a_mlp_xor, o_mlp_xor, a_svc, o_svc,
                    svc.kkt_gap, secs)};
}

// ---------------------------------------------------------------------------
// Criterion 5: planted-head recovery.

Verdict criterion5() {
  int hits = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(500 + seed);
    const int L = 4, H = 4, dh = 6;
    const int pl = static_cast<int>(rng.below(L)), ph = static_cast<int>(rng.below(H));
    ActivationStore s(L, H, dh, "planted");
    for (std::uint32_t id = 0; id < 240; ++id) {
      const std::uint8_t y = id % 2;
      const auto cat = static_cast<Category>((id / 2) % 3);
      for (int l = 0; l < L; ++l)
        for (int h = 0; h < H; ++h) {
          Vec v(dh);
          for (double& x : v) x = rng.normal();
          if (l == pl && h == ph) v[2] += y ? 1.5 : -1.5;
          s.add({id, static_cast<std::uint16_t>(l), static_cast<std::uint16_t>(h), y, cat, v});
        }
    }
    for (ProbeFamily f : kAllFamilies) {
      RankOptions o;
      o.split_seed = seed;
      const HeadRanking r = rank_heads(s, f, std::nullopt, o);
      hits += r.entries[0].layer == pl && r.entries[0].head == ph;
      ++total;
    }
  }
  return {hits == total, fmt("planted head ranked first in %d of %d (seed, family) runs", hits,
                             total)};
}

// ---------------------------------------------------------------------------
// Criteria 6 and 7: directional improvement and alpha non-monotonicity.

Verdict criterion6(const fs::path& cache, int seeds, int workers) {
  double base = 0, single = 0, multi = 0;
  std::string per_seed;
  for (int s = 0; s < seeds; ++s) {
    const SeedOutcome& o = seed_outcome(cache, s, workers);
    base += o.base.func_pct;
    single += o.single.func_pct;
    multi += o.multi.func_pct;
    per_seed += fmt("; seed %d base %.1f single %.1f (%s) multi %.1f (%s)", s, o.base.func_pct,
                    o.single.func_pct, o.single_spec.key().c_str(), o.multi.func_pct,
                    o.multi_spec.key().c_str());
  }
  base /= seeds;
  single /= seeds;
  multi /= seeds;
  const bool gain = multi - base >= 5.0;
  const bool between = single >= base && single <= multi;
  return {gain && between,
          fmt("mean functional %% over %d seeds: base %.2f, single-expert %.2f, multi-expert "
              "%.2f; multi - base = %+.2f pp (need >= 5), single between base and multi: %s",
              seeds, base, single, multi, multi - base, between ? "yes" : "no") +
              per_seed};
}

Verdict criterion7(const fs::path& cache, int seeds, int workers) {
  // Seed-averaged validation curves per (family, K).
  std::map<std::pair<int, int>, std::map<double, double>> curves;
  for (int s = 0; s < seeds; ++s)
    for (const auto& r : seed_outcome(cache, s, workers).multi_grid)
      if (r.spec.mode != ExpertMode::kBase)
        curves[{static_cast<int>(r.spec.family), r.spec.k}][r.spec.alpha] += r.func_pct / seeds;
  std::pair<int, int> best_key{};
  double best = -1.0;
  for (const auto& [key, curve] : curves)
    for (const auto& [alpha, f] : curve)
      if (f > best) {
        best = f;
        best_key = key;
      }
  const auto& curve = curves[best_key];
  double argmax = 0.0, peak = -1.0;
  std::string pts;
  for (const auto& [alpha, f] : curve) {
    if (f > peak) {
      peak = f;
      argmax = alpha;
    }
    pts += fmt(" %.1f:%.1f", alpha, f);
  }
  const double lo = curve.begin()->first, hi = curve.rbegin()->first;
  const bool interior = argmax != lo && argmax != hi;
  return {interior,
          fmt("best (family, K) = (%s, %d); seed-averaged validation func %% by alpha:%s; peak "
              "at alpha %.1f (%s)",
              std::string(family_name(static_cast<ProbeFamily>(best_key.first))).c_str(),
              best_key.second, pts.c_str(), argmax, interior ? "interior" : "boundary")};
}

// ---------------------------------------------------------------------------
// Criterion 8: overhead accounting on the seed-0 best multi-expert cell.

Verdict criterion8(const fs::path& cache, int workers) {
  const SeedOutcome& o = seed_outcome(cache, 0, workers);
  SeedRun& run = seed_run(cache, 0);
  const ExpertRegistry reg = run.bank->registry(o.multi_spec.family, o.multi_spec.k,
                                                o.multi_spec.alpha, false);
  const SteeringPlan plan = make_plan(reg, PlanTarget::kMulti, std::nullopt, SteeringMode::kStatic);
  EvalOptions eo = run.cfg.eval();
  eo.repetitions = 3;
  ExperimentResult base = evaluate(*run.model, nullptr, run.eval, eo, {}, run.training_ids);
  const ExperimentResult steered = evaluate(*run.model, &plan, run.eval, eo, {}, run.training_ids);
  const ExperimentResult base2 = evaluate(*run.model, nullptr, run.eval, eo, {}, run.training_ids);
  base.mean_s = 0.5 * (base.mean_s + base2.mean_s);
  base.mean_token_s = 0.5 * (base.mean_token_s + base2.mean_token_s);
  const OverheadReport r = overhead_report(base, steered, plan, run.model->config());
  const std::uint64_t expected = r.extra_adds_per_token * steered.generated_tokens;
  const bool exact = steered.extra_adds == expected &&
                     r.extra_adds_per_token ==
                         static_cast<std::uint64_t>(plan.layers().size()) * run.model->config().d_model;
  const bool within = r.measured_token_pct <= 27.0;
  return {exact && within,
          fmt("%s: |L_i| = %d, extra adds per token %llu = |L_i| x d_model, counted %llu = "
              "expected %llu (%s); measured overhead %.2f%% per token (limit 27%%), %.2f%% per "
              "sample, analytic %.3f%%",
              o.multi_spec.key().c_str(), r.intervened_layers,
              static_cast<unsigned long long>(r.extra_adds_per_token),
              static_cast<unsigned long long>(steered.extra_adds),
              static_cast<unsigned long long>(expected), exact ? "exact" : "MISMATCH",
              r.measured_token_pct, r.measured_pct, r.analytic_pct)};
}

// ---------------------------------------------------------------------------
// Criterion 9: full grid twice, plus a resumed run.

std::vector<std::string> split_lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> fields(const std::string& row) {
  std::vector<std::string> out;
  std::istringstream in(row);
  for (std::string f; std::getline(in, f, ',');) out.push_back(f);
  return out;
}

std::string strip_timing(const std::string& csv) {
  std::string out;
  for (const auto& line : split_lines(csv)) {
    const auto f = fields(line);
    for (std::size_t i = 0; i < std::min<std::size_t>(10, f.size()); ++i)
      out += (i ? "," : "") + f[i];
    out += "\n";
  }
  return out;
}

Verdict criterion9(const fs::path& cache, int workers) {
  SeedRun& run = seed_run(cache, 0);
  const fs::path root = cache / "grid_repro";
  fs::remove_all(root);
  const GridDefinition grid = default_grid();
  auto full_run = [&](const fs::path& dir, bool resume) {
    GridOptions o;
    o.workers = workers;
    o.work_dir = dir;
    o.resume = resume;
    o.eval = run.cfg.eval();
    o.training_ids = run.training_ids;
    const auto t0 = std::chrono::steady_clock::now();
    const GridOutcome out = run_grid(*run.model, *run.bank, run.val, grid, o);
    log(fmt("  grid run in %s: %.0f s, %d resumed", dir.filename().string().c_str(),
            seconds_since(t0), out.resumed));
    if (!out.failures.empty()) fail(ErrorCode::kData, "grid cell failed: " + out.failures.front());
    return std::make_pair(results_csv(out.results), out);
  };
  const auto [a_csv, a] = full_run(root / "a", false);
  const auto [b_csv, b] = full_run(root / "b", false);
  // Resume: keep half of run b's journal and finish from there.
  fs::copy(root / "b", root / "c", fs::copy_options::recursive);
  {
    const auto lines = split_lines(read_file_bytes(root / "c" / "journal.txt"));
    std::string kept;
    for (std::size_t i = 0; i < lines.size() / 2; ++i) kept += lines[i] + "\n";
    write_file_bytes(root / "c" / "journal.txt", kept);
  }
  const auto [c_csv, c] = full_run(root / "c", true);

  const bool complete = a.results.size() == grid.size() + 1 && b.results.size() == grid.size() + 1;
  const bool identical = strip_timing(a_csv) == strip_timing(b_csv);
  const bool resumed_identical = strip_timing(c_csv) == strip_timing(b_csv) && c.resumed > 0;
  int timing_bad = 0;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.results.size() && i < b.results.size(); ++i) {
    const double x = a.results[i].mean_s, y = b.results[i].mean_s;
    const double rel = std::abs(x - y) / std::max(x, y);
    worst = std::max(worst, rel);
    timing_bad += rel > 0.20;
  }
  return {complete && identical && resumed_identical && timing_bad == 0,
          fmt("%zu cells + base per run; non-timing columns identical across runs: %s; resumed "
              "run (%d cells from journal) identical: %s; timing within 20%%: %zu of %zu cells "
              "(worst %.1f%%)",
              grid.size(), identical ? "yes" : "no", c.resumed, resumed_identical ? "yes" : "no",
              a.results.size() - timing_bad, a.results.size(), 100.0 * worst)};
}

// ---------------------------------------------------------------------------
// Criterion 10: artifact round trips and a hand-built interchange fixture.

struct FixtureBytes {
  std::string b;
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    le(u);
  }
  std::string finish() {
    le(static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(b.data()), static_cast<uInt>(b.size()))));
    return b;
  }
};

Verdict criterion10(const fs::path& cache) {
  const fs::path dir = cache / "roundtrip";
  fs::create_directories(dir);
  std::vector<std::string> failed;
  auto check = [&](bool ok, const char* what) {
    if (!ok) failed.push_back(what);
  };

  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.max_context = 96;
  c.seed = 10;
  const ModelState m = ModelState::initialize(c);
  save_model(m, dir / "model.bin");
  const ModelState m2 = load_model(dir / "model.bin");
  check(m2.params() == m.params() && m2.config() == m.config(), "model parameters");
  const DatasetManifest prompts = generate_prompt_set(77, 20, kEvalIdBase);
  bool same_gen = true;
  for (const auto& s : prompts.samples) {
    DecodeOptions d;
    d.max_new = 24;
    same_gen &= generate(m, make_prompt(s.spec), nullptr, d).tokens ==
                generate(m2, make_prompt(s.spec), nullptr, d).tokens;
  }
  check(same_gen, "model generations");

  const DatasetManifest corpus = generate_corpus(78, 10, 0.5);
  const ActivationStore store = harvest(m, corpus);
  export_store(store, dir / "activations.bin");
  check(import_store(dir / "activations.bin") == store, "activation store");

  RankOptions ro;
  std::vector<ProbeBundleEntry> bundle;
  for (ProbeFamily f : kAllFamilies) {
    std::vector<ProbeModel> probes;
    rank_heads(store, f, std::nullopt, ro, &probes);
    for (int i = 0; i < static_cast<int>(probes.size()); ++i)
      bundle.push_back({{i / c.n_heads, i % c.n_heads}, probes[static_cast<std::size_t>(i)]});
  }
  save_probe_bundle(bundle, dir / "probes.bin");
  const auto bundle2 = load_probe_bundle(dir / "probes.bin");
  check(bundle2 == bundle, "probe bundle");
  bool same_pred = bundle2.size() == bundle.size();
  for (std::size_t i = 0; same_pred && i < bundle.size(); ++i)
    for (const auto& r : store.group(bundle[i].head.layer, bundle[i].head.head)) {
      const Prediction a = predict(bundle[i].probe, r.vector), b = predict(bundle2[i].probe, r.vector);
      same_pred &= a.cls == b.cls && a.score == b.score;
    }
  check(same_pred, "probe predictions");

  const ExpertBank bank(store, m, ro);
  const ExpertRegistry reg = bank.registry(ProbeFamily::kLr, 3, 2.0, true);
  save_registry(reg, dir / "experts.bin");
  const ExpertRegistry reg2 = load_registry(dir / "experts.bin");
  check(reg2 == reg, "expert registry");
  const SteeringPlan p1 = make_plan(reg, PlanTarget::kMulti, std::nullopt, SteeringMode::kDynamic);
  const SteeringPlan p2 = make_plan(reg2, PlanTarget::kMulti, std::nullopt, SteeringMode::kDynamic);
  const DynamicGate g1 = make_dynamic_gate(reg, PlanTarget::kMulti);
  const DynamicGate g2 = make_dynamic_gate(reg2, PlanTarget::kMulti);
  bool same_steer = true;
  for (const auto& s : prompts.samples) {
    DecodeOptions d;
    d.max_new = 24;
    same_steer &= generate(m, make_prompt(s.spec), &p1, d, g1).tokens ==
                  generate(m, make_prompt(s.spec), &p2, d, g2).tokens;
  }
  check(same_steer, "steered generations from reloaded experts");

  // Interchange fixture written byte by byte from the documented layout.
  FixtureBytes f;
  f.b.append("MELTACT\1", 8);
  f.le<std::uint32_t>(1);
  f.le<std::uint32_t>(1);
  f.le<std::uint32_t>(2);
  f.le<std::uint32_t>(2);
  f.le<std::uint64_t>(8);
  f.le<std::uint32_t>(8);
  f.b.append("external", 8);
  const double vals[4][2] = {{1.0, 0.1}, {1.2, -0.3}, {-1.0, 0.2}, {-0.8, -0.1}};
  for (std::uint16_t head = 0; head < 2; ++head)
    for (std::uint32_t id = 0; id < 4; ++id) {
      f.le(id);
      f.le<std::uint16_t>(0);
      f.le(head);
      f.le<std::uint8_t>(id < 2 ? 1 : 0);
      f.le<std::uint8_t>(static_cast<std::uint8_t>(id % 3));
      f.f64(head == 1 ? vals[id][0] : vals[id][1]);
      f.f64(head == 1 ? vals[id][1] : 0.5);
    }
  write_file_bytes(dir / "fixture.bin", f.finish());
  bool fixture_ok = false;
  try {
    const ActivationStore fx = import_store(dir / "fixture.bin");
    fixture_ok = fx.n_layers() == 1 && fx.n_heads() == 2 && fx.d_head() == 2 && fx.size() == 8 &&
                 fx.fingerprint() == "external" && fx.group(0, 1)[1].vector[0] == 1.2;
  } catch (const Error& e) {
    log(std::string("fixture: ") + e.what());
  }
  check(fixture_ok, "hand-built interchange fixture");

  std::string detail = "model, activation store, probe bundle and expert registry round trips; "
                       "hand-built activation fixture imports";
  if (!failed.empty()) {
    detail += "; failed:";
    for (const auto& s : failed) detail += " [" + s + "]";
  }
  return {failed.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"meltrtl acceptance criteria"};
  std::string only;
  std::string cache = "acceptance_cache";
  int seeds = 5;
  int workers = 1;
  app.add_option("--only", only, "comma-separated criteria to run (default: all)");
  app.add_option("--cache", cache, "directory for cached models, probes and grids");
  app.add_option("--seeds", seeds, "training seeds for criteria 6 and 7")->check(CLI::Range(1, 50));
  app.add_option("--workers", workers, "grid worker threads")->check(CLI::Range(1, 256));
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  if (only.empty()) {
    for (int i = 1; i <= 10; ++i) selected.insert(i);
  } else {
    std::istringstream in(only);
    for (std::string t; std::getline(in, t, ',');) selected.insert(std::stoi(t));
  }
  const fs::path cache_dir = cache;
  fs::create_directories(cache_dir);

  const std::map<int, std::pair<const char*, std::function<Verdict()>>> criteria = {
      {1, {"steering identity gate", [&] { return criterion1(cache_dir); }}},
      {2, {"injection correctness", [] { return criterion2(); }}},
      {3, {"gradient checks", [] { return criterion3(); }}},
      {4, {"probe oracle suite", [] { return criterion4(); }}},
      {5, {"planted-head recovery", [] { return criterion5(); }}},
      {6, {"directional improvement", [&] { return criterion6(cache_dir, seeds, workers); }}},
      {7, {"alpha non-monotonicity", [&] { return criterion7(cache_dir, seeds, workers); }}},
      {8, {"overhead accounting", [&] { return criterion8(cache_dir, workers); }}},
      {9, {"grid reproducibility", [&] { return criterion9(cache_dir, workers); }}},
      {10, {"format round-trips", [&] { return criterion10(cache_dir); }}},
  };
  int failures = 0;
  for (int id : selected) {
    const auto it = criteria.find(id);
    if (it == criteria.end()) {
      std::fprintf(stderr, "unknown criterion %d\n", id);
      return 2;
    }
    Verdict v;
    try {
      v = it->second.second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failures += !v.pass;
    std::printf("criterion %d %s: %s | %s\n", id, v.pass ? "PASS" : "FAIL", it->second.first,
                v.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
