#include "meltrtl/evalbench.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_set>

#include "meltrtl/binio.h"
#include "meltrtl/error.h"

namespace meltrtl {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

int scope_index(Scope s) { return s ? static_cast<int>(*s) : -1; }

const Scope kScopes[] = {std::nullopt, Category::kCombinational, Category::kSequential,
                         Category::kFsm};

PlanTarget target_of(ExpertMode m) {
  switch (m) {
    case ExpertMode::kGeneral: return PlanTarget::kGeneral;
    case ExpertMode::kComb: return PlanTarget::kComb;
    case ExpertMode::kSeq: return PlanTarget::kSeq;
    case ExpertMode::kFsm: return PlanTarget::kFsm;
    case ExpertMode::kMulti: return PlanTarget::kMulti;
    default: fail(ErrorCode::kContract, "expert mode has no plan target");
  }
}

// Plan and gate for one prompt; a null plan generates unsteered.
struct Steer {
  const SteeringPlan* plan = nullptr;
  const DynamicGate* gate = nullptr;
};

ExperimentResult score(const ModelState& model, const DatasetManifest& eval_set,
                       const EvalOptions& options, const std::vector<std::uint32_t>& training_ids,
                       const std::function<Steer(const Sample&)>& steer_for) {
  require(options.repetitions >= 1, "evaluate: repetitions must be >= 1");
  require(options.warmup >= 0, "evaluate: warmup must be >= 0");
  const std::unordered_set<std::uint32_t> train(training_ids.begin(), training_ids.end());
  for (const Sample& s : eval_set.samples)
    if (train.count(s.id))
      fail(ErrorCode::kContract, "evaluate: eval sample id " + std::to_string(s.id) +
                                     " also appears in the probe training set");
  ExperimentResult r;
  const std::size_t n = eval_set.samples.size();
  r.n_eval = static_cast<int>(n);
  r.synthesizable.assign(n, 0);
  r.functional.assign(n, 0);
  std::array<int, kNumCategories> cat_n{}, cat_func{};
  std::vector<double> times;
  double timed_tokens = 0.0;
  double seq_total = 0.0;
  for (int rep = 0; rep < options.repetitions; ++rep)
    for (std::size_t i = 0; i < n; ++i) {
      const Sample& s = eval_set.samples[i];
      const Steer st = steer_for(s);
      const TokenSeq prompt = make_prompt(s.spec);
      const Generation g = generate(model, prompt, st.plan, options.decode,
                                    st.gate ? *st.gate : DynamicGate{});
      if (rep > 0 || static_cast<int>(i) >= options.warmup) {
        times.push_back(g.total_seconds);
        timed_tokens += static_cast<double>(g.tokens.size());
      }
      if (rep > 0) continue;
      r.generated_tokens += g.tokens.size();
      r.extra_adds += g.extra_adds;
      seq_total += static_cast<double>(prompt.size() + g.tokens.size());
      const int c = static_cast<int>(s.category);
      ++cat_n[c];
      if (!g.hit_end) {
        ++r.truncated;
        continue;
      }
      r.synthesizable[i] = parses(g.tokens);
      r.functional[i] = r.synthesizable[i] && check_functional(s.spec, g.tokens) == 1;
      cat_func[c] += r.functional[i];
    }
  if (r.truncated > 0)
    std::cerr << "evaluate: " << r.truncated << " of " << n
              << " generations truncated (scored non-synthesizable)\n";
  const auto pct = [](double a, double b) { return b > 0 ? 100.0 * a / b : kNaN; };
  int n_synth = 0, n_func = 0;
  for (std::size_t i = 0; i < n; ++i) {
    n_synth += r.synthesizable[i];
    n_func += r.functional[i];
  }
  r.synth_pct = n ? pct(n_synth, static_cast<double>(n)) : 0.0;
  r.func_pct = n ? pct(n_func, static_cast<double>(n)) : 0.0;
  for (int c = 0; c < kNumCategories; ++c) r.func_by_category[c] = pct(cat_func[c], cat_n[c]);
  r.mean_sequence_length = n ? seq_total / static_cast<double>(n) : 0.0;
  if (!times.empty()) {
    double sum = 0.0;
    for (double t : times) sum += t;
    r.mean_s = sum / static_cast<double>(times.size());
    r.mean_token_s = timed_tokens > 0 ? sum / timed_tokens : kNaN;
    double var = 0.0;
    for (double t : times) var += (t - r.mean_s) * (t - r.mean_s);
    r.std_s = times.size() > 1 ? std::sqrt(var / static_cast<double>(times.size() - 1)) : 0.0;
  }
  r.overhead_pct = kNaN;
  return r;
}

std::string fmt_pct(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string fmt(const char* f, double v) {
  if (std::isnan(v)) return "nan";
  char buf[48];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<std::string> split_fields(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t p = line.find(sep, start);
    out.emplace_back(line.substr(start, p == std::string_view::npos ? line.npos : p - start));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

double parse_double(const std::string& s, std::string_view what) {
  if (s == "nan") return kNaN;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::kParse, "results row: bad " + std::string(what) + " '" + s + "'");
  }
}

int parse_int(const std::string& s, std::string_view what) {
  const double v = parse_double(s, what);
  if (std::isnan(v) || v != std::floor(v))
    fail(ErrorCode::kParse, "results row: bad " + std::string(what) + " '" + s + "'");
  return static_cast<int>(v);
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorCode::kIo, "cannot write " + path.string());
  f << text;
  if (!f) fail(ErrorCode::kIo, "write failed for " + path.string());
}

}  // namespace

std::string_view expert_mode_name(ExpertMode m) {
  switch (m) {
    case ExpertMode::kBase: return "base";
    case ExpertMode::kGeneral: return "general";
    case ExpertMode::kComb: return "comb";
    case ExpertMode::kSeq: return "seq";
    case ExpertMode::kFsm: return "fsm";
    case ExpertMode::kMulti: return "multi";
    case ExpertMode::kRouted: return "routed";
  }
  return "?";
}

ExpertMode expert_mode_from_name(std::string_view name) {
  for (auto m : {ExpertMode::kBase, ExpertMode::kGeneral, ExpertMode::kComb, ExpertMode::kSeq,
                 ExpertMode::kFsm, ExpertMode::kMulti, ExpertMode::kRouted})
    if (expert_mode_name(m) == name) return m;
  fail(ErrorCode::kConfig, "unknown expert mode '" + std::string(name) +
                               "' (expected base, general, comb, seq, fsm, multi or routed)");
}

std::string ExperimentSpec::key() const {
  if (mode == ExpertMode::kBase) return "base";
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s-%d-%.2f-%s%s", std::string(family_name(family)).c_str(), k,
                alpha, std::string(expert_mode_name(mode)).c_str(),
                steering == SteeringMode::kDynamic ? "-dynamic" : "");
  return buf;
}

ExperimentResult evaluate(const ModelState& model, const SteeringPlan* plan,
                          const DatasetManifest& eval_set, const EvalOptions& options,
                          const DynamicGate& gate, const std::vector<std::uint32_t>& training_ids) {
  if (plan) plan->validate(model.config());
  const Steer st{plan, gate ? &gate : nullptr};
  return score(model, eval_set, options, training_ids, [&](const Sample&) { return st; });
}

ExperimentResult evaluate_routed(const ModelState& model, const ExpertRegistry& registry,
                                 double alpha, SteeringMode steering,
                                 const DatasetManifest& eval_set, const EvalOptions& options,
                                 const std::vector<std::uint32_t>& training_ids) {
  std::map<int, SteeringPlan> plans;
  std::map<int, DynamicGate> gates;
  for (const ExpertProfile* p : registry.profiles()) {
    const PlanTarget t = p->scope ? static_cast<PlanTarget>(static_cast<int>(*p->scope) + 1)
                                  : PlanTarget::kGeneral;
    SteeringPlan plan = make_plan(registry, t, alpha, steering);
    plan.validate(model.config());
    plans.emplace(scope_index(p->scope), std::move(plan));
    if (steering == SteeringMode::kDynamic)
      gates.emplace(scope_index(p->scope), make_dynamic_gate(registry, t));
  }
  return score(model, eval_set, options, training_ids, [&](const Sample& s) {
    const int key = scope_index(route(registry, s.spec));
    const auto g = gates.find(key);
    return Steer{&plans.at(key), g == gates.end() ? nullptr : &g->second};
  });
}

ExpertBank::ExpertBank(const ActivationStore& store, const ModelState& model)
    : store_(store), model_(&model) {
  require(store.n_layers() == model.config().n_layers && store.n_heads() == model.config().n_heads,
          "ExpertBank: store geometry differs from the model's");
}

ExpertBank::ExpertBank(const ActivationStore& store, const ModelState& model,
                       const RankOptions& options)
    : ExpertBank(store, model) {
  for (ProbeFamily f : kAllFamilies)
    for (Scope s : kScopes) {
      std::vector<ProbeModel> probes;
      rankings_.emplace(std::pair(static_cast<int>(f), scope_index(s)),
                        rank_heads(store_, f, s, options, &probes));
      probes_.emplace(std::pair(static_cast<int>(f), scope_index(s)), std::move(probes));
    }
}

void ExpertBank::save_probes(const std::filesystem::path& dir) const {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::kIo, "cannot create " + dir.string());
  for (const auto& [key, probes] : probes_) {
    const auto& r = rankings_.at(key);
    std::vector<ProbeBundleEntry> entries;
    for (int l = 0; l < r.n_layers; ++l)
      for (int h = 0; h < r.n_heads; ++h)
        entries.push_back({{l, h}, probes[static_cast<std::size_t>(l) * r.n_heads + h]});
    save_probe_bundle(entries, dir / (std::string(family_name(r.family)) + "_" +
                                      scope_name(r.scope) + ".bin"));
  }
}

ExpertBank ExpertBank::load(const ActivationStore& store, const ModelState& model,
                            const std::filesystem::path& dir) {
  ExpertBank bank(store, model);
  const int L = store.n_layers(), H = store.n_heads();
  for (ProbeFamily f : kAllFamilies)
    for (Scope s : kScopes) {
      const auto path = dir / (std::string(family_name(f)) + "_" + scope_name(s) + ".bin");
      if (!std::filesystem::exists(path))
        fail(ErrorCode::kMissingArtifact, "missing probe bundle " + path.string() +
                                              " (run train-probes first)");
      std::vector<ProbeModel> probes(static_cast<std::size_t>(L) * H);
      std::vector<bool> seen(probes.size(), false);
      for (auto& e : load_probe_bundle(path)) {
        if (e.head.layer < 0 || e.head.layer >= L || e.head.head < 0 || e.head.head >= H)
          fail(ErrorCode::kFormat, path.string() + ": head outside the model");
        const std::size_t i = static_cast<std::size_t>(e.head.layer) * H + e.head.head;
        if (seen[i]) fail(ErrorCode::kFormat, path.string() + ": duplicate head");
        seen[i] = true;
        probes[i] = std::move(e.probe);
      }
      if (std::find(seen.begin(), seen.end(), false) != seen.end())
        fail(ErrorCode::kFormat, path.string() + ": bundle does not cover every head");
      const std::pair key(static_cast<int>(f), scope_index(s));
      bank.rankings_.emplace(key, ranking_from_probes(probes, f, s, L, H));
      bank.probes_.emplace(key, std::move(probes));
    }
  return bank;
}

const HeadRanking& ExpertBank::ranking(ProbeFamily family, Scope scope) const {
  return rankings_.at({static_cast<int>(family), scope_index(scope)});
}

const std::vector<ProbeModel>& ExpertBank::probes(ProbeFamily family, Scope scope) const {
  return probes_.at({static_cast<int>(family), scope_index(scope)});
}

std::vector<HeadRanking> ExpertBank::rankings() const {
  std::vector<HeadRanking> out;
  for (const auto& [key, r] : rankings_) out.push_back(r);
  return out;
}

ExpertRegistry ExpertBank::registry(ProbeFamily family, int k, double alpha,
                                    bool with_probes) const {
  const int k_eff = std::min(k, store_.n_layers() * store_.n_heads());
  ExpertRegistry reg;
  for (Scope s : kScopes) {
    ExpertOptions o;
    o.attach_probes = with_probes;
    for (ProbeFamily f : kAllFamilies) o.probe_sets[static_cast<int>(f)] = &probes(f, s);
    ExpertProfile p = build_expert(store_, ranking(family, s), k_eff, alpha, *model_, s, o);
    p.k = k;
    reg.add(std::move(p));
  }
  return reg;
}

std::size_t GridDefinition::size() const {
  return families.size() * ks.size() * alphas.size() * modes.size();
}

std::vector<ExperimentSpec> GridDefinition::cells() const {
  std::vector<ExperimentSpec> out;
  for (ProbeFamily f : families)
    for (int k : ks)
      for (double a : alphas)
        for (ExpertMode m : modes) {
          ExperimentSpec s;
          s.family = f;
          s.k = k;
          s.alpha = a;
          s.mode = m;
          s.steering = steering;
          out.push_back(s);
        }
  return out;
}

void GridDefinition::validate() const {
  if (families.empty() || ks.empty() || alphas.empty() || modes.empty())
    fail(ErrorCode::kConfig, "grid: families, K, alpha and mode lists must be non-empty");
  for (int k : ks)
    if (k < 1) fail(ErrorCode::kConfig, "grid: K values must be >= 1");
  for (double a : alphas)
    if (!(a >= 0.0) || !std::isfinite(a))
      fail(ErrorCode::kConfig, "grid: alpha values must be finite and >= 0");
  for (ExpertMode m : modes)
    if (m == ExpertMode::kBase)
      fail(ErrorCode::kConfig, "grid: base is always run as the reference cell; drop it");
  std::set<std::string> keys;
  for (const auto& c : cells())
    if (!keys.insert(c.key()).second)
      fail(ErrorCode::kConfig, "grid: duplicate cell " + c.key());
}

GridDefinition default_grid() {
  GridDefinition g;
  g.families = {ProbeFamily::kLr, ProbeFamily::kMlp, ProbeFamily::kSvc};
  g.ks = {5, 10, 15, 20, 25, 30, 35, 40, 45, 48};
  g.alphas = {0.1, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0};
  g.modes = {ExpertMode::kMulti};
  return g;
}

ExperimentResult run_cell(const ModelState& model, const ExpertBank& bank,
                          const DatasetManifest& eval_set, const ExperimentSpec& spec,
                          const EvalOptions& options,
                          const std::vector<std::uint32_t>& training_ids) {
  EvalOptions o = options;
  o.repetitions = std::max(options.repetitions, spec.repetitions);
  ExperimentResult r;
  if (spec.mode == ExpertMode::kBase) {
    r = evaluate(model, nullptr, eval_set, o, {}, training_ids);
  } else {
    const bool dynamic = spec.steering == SteeringMode::kDynamic;
    const ExpertRegistry reg = bank.registry(spec.family, spec.k, spec.alpha, dynamic);
    if (spec.mode == ExpertMode::kRouted) {
      r = evaluate_routed(model, reg, spec.alpha, spec.steering, eval_set, o, training_ids);
    } else {
      const PlanTarget t = target_of(spec.mode);
      const SteeringPlan plan = make_plan(reg, t, spec.alpha, spec.steering);
      const DynamicGate gate = dynamic ? make_dynamic_gate(reg, t) : DynamicGate{};
      r = evaluate(model, &plan, eval_set, o, gate, training_ids);
    }
  }
  r.spec = spec;
  return r;
}

std::string result_row(const ExperimentResult& r) {
  const bool base = r.spec.mode == ExpertMode::kBase;
  std::string mode(expert_mode_name(r.spec.mode));
  if (!base && r.spec.steering == SteeringMode::kDynamic) mode += ":dynamic";
  std::string out = base ? "none" : std::string(family_name(r.spec.family));
  out += "," + std::to_string(base ? 0 : r.spec.k);
  out += "," + fmt("%.2f", base ? 0.0 : r.spec.alpha);
  out += "," + mode;
  out += "," + std::to_string(r.n_eval);
  out += "," + fmt_pct(r.synth_pct) + "," + fmt_pct(r.func_pct);
  for (double v : r.func_by_category) out += "," + fmt_pct(v);
  out += "," + fmt("%.6f", r.mean_s) + "," + fmt("%.6f", r.std_s);
  out += "," + fmt_pct(r.overhead_pct);
  return out;
}

std::string results_csv(const std::vector<ExperimentResult>& results) {
  std::string out(kResultsHeader);
  out += "\n";
  for (const auto& r : results) out += result_row(r) + "\n";
  return out;
}

ExperimentResult parse_result_row(std::string_view row) {
  const auto f = split_fields(row, ',');
  if (f.size() != 13)
    fail(ErrorCode::kParse, "results row: expected 13 fields, got " + std::to_string(f.size()));
  ExperimentResult r;
  std::string mode = f[3];
  if (mode.ends_with(":dynamic")) {
    r.spec.steering = SteeringMode::kDynamic;
    mode.resize(mode.size() - 8);
  }
  try {
    r.spec.mode = expert_mode_from_name(mode);
    if (r.spec.mode != ExpertMode::kBase) r.spec.family = family_from_name(f[0]);
  } catch (const Error& e) {
    fail(ErrorCode::kParse, std::string("results row: ") + e.what());
  }
  r.spec.k = parse_int(f[1], "K");
  r.spec.alpha = parse_double(f[2], "alpha");
  r.n_eval = parse_int(f[4], "n");
  r.synth_pct = parse_double(f[5], "synth_pct");
  r.func_pct = parse_double(f[6], "func_pct");
  for (int c = 0; c < kNumCategories; ++c) r.func_by_category[c] = parse_double(f[7 + c], "func");
  r.mean_s = parse_double(f[10], "mean_s");
  r.std_s = parse_double(f[11], "std_s");
  r.overhead_pct = parse_double(f[12], "overhead_pct");
  return r;
}

std::vector<ExperimentResult> parse_results_csv(std::string_view csv) {
  std::vector<ExperimentResult> out;
  bool header = true;
  for (const auto& line : split_fields(csv, '\n')) {
    if (line.empty() || line[0] == '#') continue;
    if (header) {
      if (line != kResultsHeader) fail(ErrorCode::kParse, "results CSV: unexpected header");
      header = false;
      continue;
    }
    out.push_back(parse_result_row(line));
  }
  return out;
}

GridOutcome run_grid(const ModelState& model, const ExpertBank& bank,
                     const DatasetManifest& eval_set, const GridDefinition& grid,
                     const GridOptions& options) {
  grid.validate();
  require(options.workers >= 1, "run_grid: workers must be >= 1");
  namespace fs = std::filesystem;
  const bool persist = !options.work_dir.empty();
  const fs::path journal_path = options.work_dir / "journal.txt";
  const fs::path cells_dir = options.work_dir / "cells";
  std::set<std::string> done;
  if (persist) {
    std::error_code ec;
    if (!options.resume) {
      fs::remove(journal_path, ec);
      fs::remove_all(cells_dir, ec);
    }
    fs::create_directories(cells_dir, ec);
    if (ec) fail(ErrorCode::kIo, "run_grid: cannot create " + cells_dir.string());
    std::ifstream j(journal_path);
    for (std::string line; std::getline(j, line);)
      if (!line.empty()) done.insert(line);
  }
  std::mutex mu;
  std::ofstream journal;
  if (persist) {
    journal.open(journal_path, std::ios::app);
    if (!journal) fail(ErrorCode::kIo, "run_grid: cannot open " + journal_path.string());
  }
  GridOutcome out;

  // Returns the resumed row when the cell is journaled and its row file parses.
  const auto load_done = [&](const std::string& key) -> std::optional<std::string> {
    if (!persist || !done.count(key)) return std::nullopt;
    std::ifstream f(cells_dir / (key + ".csv"));
    std::string row;
    if (!std::getline(f, row)) return std::nullopt;
    try {
      parse_result_row(row);
    } catch (const Error&) {
      return std::nullopt;
    }
    return row;
  };
  const auto record = [&](const std::string& key, const std::string& row) {
    if (!persist) return;
    const fs::path tmp = cells_dir / (key + ".csv.tmp");
    write_text(tmp, row + "\n");
    fs::rename(tmp, cells_dir / (key + ".csv"));
    journal << key << "\n";
    journal.flush();
  };

  ExperimentSpec base_spec;
  base_spec.mode = ExpertMode::kBase;
  ExperimentResult base;
  std::string base_row;
  if (auto row = load_done("base")) {
    base = parse_result_row(*row);
    base_row = *row;
    ++out.resumed;
    if (options.on_cell) options.on_cell(base, true);
  } else {
    base = run_cell(model, bank, eval_set, base_spec, options.eval, options.training_ids);
    base_row = result_row(base);
    record("base", base_row);
    if (options.on_cell) options.on_cell(base, false);
  }

  const std::vector<ExperimentSpec> cells = grid.cells();
  std::vector<std::optional<ExperimentResult>> results(cells.size());
  std::vector<std::string> rows(cells.size());
  std::vector<std::string> errors(cells.size());
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (auto row = load_done(cells[i].key())) {
      results[i] = parse_result_row(*row);
      results[i]->spec = cells[i];
      rows[i] = *row;
      ++out.resumed;
      if (options.on_cell) options.on_cell(*results[i], true);
    } else {
      pending.push_back(i);
    }
  }
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < pending.size();) {
      const std::size_t i = pending[j];
      try {
        ExperimentResult r =
            run_cell(model, bank, eval_set, cells[i], options.eval, options.training_ids);
        r.overhead_pct = base.mean_s > 0 ? 100.0 * (r.mean_s / base.mean_s - 1.0) : kNaN;
        const std::string row = result_row(r);
        std::lock_guard lock(mu);
        record(cells[i].key(), row);
        rows[i] = row;
        results[i] = std::move(r);
        if (options.on_cell) options.on_cell(*results[i], false);
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        errors[i] = cells[i].key() + ": " + e.what();
        std::cerr << "grid: cell failed: " << errors[i] << "\n";
      }
    }
  };
  const int n_threads = std::min<int>(options.workers, std::max<std::size_t>(pending.size(), 1));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  out.results.push_back(std::move(base));
  out.rows.push_back(base_row);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!errors[i].empty()) out.failures.push_back(errors[i]);
    if (!results[i]) continue;
    out.results.push_back(std::move(*results[i]));
    out.rows.push_back(rows[i]);
  }
  if (persist && !out.failures.empty()) {
    std::string text;
    for (const auto& f : out.failures) text += f + "\n";
    write_text(options.work_dir / "failures.txt", text);
  }
  return out;
}

OverheadReport overhead_report(const ExperimentResult& base, const ExperimentResult& steered,
                               const SteeringPlan& plan, const ModelConfig& config) {
  if (base.spec.mode != ExpertMode::kBase)
    fail(ErrorCode::kContract, "overhead_report: the reference result is not a Base cell");
  require(base.n_eval == steered.n_eval, "overhead_report: eval sets differ in size");
  OverheadReport r;
  r.base_mean_s = base.mean_s;
  r.steered_mean_s = steered.mean_s;
  r.measured_pct = base.mean_s > 0 ? 100.0 * (steered.mean_s / base.mean_s - 1.0) : kNaN;
  r.base_token_s = base.mean_token_s;
  r.steered_token_s = steered.mean_token_s;
  r.measured_token_pct =
      base.mean_token_s > 0 ? 100.0 * (steered.mean_token_s / base.mean_token_s - 1.0) : kNaN;
  r.intervened_layers = static_cast<int>(plan.layers().size());
  r.mean_sequence_length = steered.mean_sequence_length;
  r.analytic_pct = r.mean_sequence_length > 0
                       ? 100.0 * r.intervened_layers / (r.mean_sequence_length * config.d_model)
                       : kNaN;
  r.extra_adds_per_token = static_cast<std::uint64_t>(r.intervened_layers) * config.d_model;
  r.counted_extra_adds = steered.extra_adds;
  r.steered_tokens = steered.generated_tokens;
  return r;
}

std::string overhead_text(const OverheadReport& r) {
  std::ostringstream o;
  char buf[1024];
  std::snprintf(buf, sizeof buf,
                "base mean s/sample        %.6f\n"
                "steered mean s/sample     %.6f\n"
                "measured overhead         %.2f%%\n"
                "base s/token              %.8f\n"
                "steered s/token           %.8f\n"
                "measured per-token        %.2f%%\n"
                "analytic |L_i|/(s*d)      %.4f%%  (|L_i|=%d, s=%.1f)\n"
                "extra adds per token      %llu\n"
                "counted extra adds        %llu over %llu steered tokens\n",
                r.base_mean_s, r.steered_mean_s, r.measured_pct, r.base_token_s,
                r.steered_token_s, r.measured_token_pct, r.analytic_pct,
                r.intervened_layers, r.mean_sequence_length,
                static_cast<unsigned long long>(r.extra_adds_per_token),
                static_cast<unsigned long long>(r.counted_extra_adds),
                static_cast<unsigned long long>(r.steered_tokens));
  o << buf;
  return o.str();
}

}  // namespace meltrtl
