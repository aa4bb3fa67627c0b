// meltrtl: command-line driver for the steering pipeline.
//
// Every subcommand reads the run configuration (--config file, then --set
// overrides, then convenience flags), validates it, writes the effective
// configuration to <out_dir>/config.txt and exits with the numeric ErrorCode
// of any failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "meltrtl/binio.h"
#include "meltrtl/config.h"
#include "meltrtl/corpus.h"
#include "meltrtl/error.h"
#include "meltrtl/evalbench.h"
#include "meltrtl/harvest.h"
#include "meltrtl/hdl.h"
#include "meltrtl/model_io.h"
#include "meltrtl/probes.h"
#include "meltrtl/steering.h"
#include "meltrtl/trainer.h"

namespace fs = std::filesystem;
using namespace meltrtl;

namespace {

constexpr const char* kCorpusFile = "corpus.jsonl";
constexpr const char* kEvalFile = "eval.jsonl";
constexpr const char* kValFile = "val.jsonl";
constexpr const char* kModelFile = "model.bin";
constexpr const char* kStoreFile = "activations.bin";
constexpr const char* kProbeDir = "probes";
constexpr const char* kRankingDir = "rankings";
constexpr const char* kExpertFile = "experts.bin";
constexpr const char* kGridDir = "grid";
constexpr const char* kReportDir = "reports";

struct CommonFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::string out_dir;
};

struct SteerFlags {
  std::string family, mode, policy;
  std::optional<int> k;
  std::optional<double> alpha;
  bool dynamic = false;
};

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_file, "key = value configuration file");
  cmd->add_option("--set", f.sets, "override one key (key=value); repeatable");
  cmd->add_option("--out", f.out_dir, "output directory (overrides out_dir)");
}

void add_steer(CLI::App* cmd, SteerFlags& f) {
  cmd->add_option("--family", f.family, "probe family: lr, mlp or svc");
  cmd->add_option("--k", f.k, "heads per expert");
  cmd->add_option("--alpha", f.alpha, "steering strength");
  cmd->add_option("--mode", f.mode, "general, comb, seq, fsm, multi or routed");
  cmd->add_flag("--dynamic", f.dynamic, "probe-gated steering");
}

RunConfig load_config(const CommonFlags& c, const SteerFlags* s = nullptr) {
  RunConfig cfg;
  if (!c.config_file.empty()) cfg.merge_file(c.config_file);
  for (const auto& a : c.sets) cfg.set_assignment(a);
  if (!c.out_dir.empty()) cfg.set("out_dir", c.out_dir);
  if (s) {
    if (!s->family.empty()) cfg.set("steer.family", s->family);
    if (s->k) cfg.set("steer.k", std::to_string(*s->k));
    if (s->alpha) cfg.set("steer.alpha", format_number(*s->alpha));
    if (!s->mode.empty()) cfg.set("steer.mode", s->mode);
    if (s->dynamic) cfg.set("steer.gating", "dynamic");
    if (!s->policy.empty()) cfg.set("harvest.policy", s->policy);
  }
  cfg.validate();
  const fs::path out = cfg.out_dir();
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) fail(ErrorCode::kIo, "cannot create output directory " + out.string());
  write_file_bytes(out / "config.txt", cfg.to_text());
  return cfg;
}

fs::path require(const RunConfig& cfg, const char* name, const char* producer) {
  const fs::path p = cfg.out_dir() / name;
  if (!fs::exists(p))
    fail(ErrorCode::kMissingArtifact,
         "missing artifact " + p.string() + " (run '" + producer + "' first)");
  return p;
}

DatasetManifest load_dataset(const RunConfig& cfg, const char* name) {
  return parse_dataset(read_file_bytes(require(cfg, name, "gen-corpus")));
}

ModelState load_trained(const RunConfig& cfg) {
  const ModelConfig expected = cfg.model();
  return load_model(require(cfg, kModelFile, "train-lm"), &expected);
}

std::vector<std::uint32_t> ids_of(const DatasetManifest& m) {
  std::vector<std::uint32_t> ids;
  ids.reserve(m.samples.size());
  for (const auto& s : m.samples) ids.push_back(s.id);
  return ids;
}

PlanTarget plan_target(ExpertMode m) {
  switch (m) {
    case ExpertMode::kGeneral: return PlanTarget::kGeneral;
    case ExpertMode::kComb: return PlanTarget::kComb;
    case ExpertMode::kSeq: return PlanTarget::kSeq;
    case ExpertMode::kFsm: return PlanTarget::kFsm;
    case ExpertMode::kMulti: return PlanTarget::kMulti;
    default: fail(ErrorCode::kConfig, "mode '" + std::string(expert_mode_name(m)) +
                                          "' has no single steering plan");
  }
}

// Loads the bank from saved probes, or trains (and saves) it when none exist.
ExpertBank load_or_train_bank(const RunConfig& cfg, const ModelState& model, bool* trained) {
  const ActivationStore store = import_store(require(cfg, kStoreFile, "harvest"));
  if (store.fingerprint() != model.fingerprint())
    fail(ErrorCode::kFormat, "activation store was harvested from a different model");
  const fs::path dir = cfg.out_dir() / kProbeDir;
  if (fs::exists(dir)) {
    *trained = false;
    return ExpertBank::load(store, model, dir);
  }
  *trained = true;
  ExpertBank bank(store, model, cfg.rank());
  fs::create_directories(dir);
  bank.save_probes(dir);
  return bank;
}

void write_rankings(const ExpertBank& bank, const fs::path& dir) {
  fs::create_directories(dir);
  for (const auto& r : bank.rankings())
    write_file_bytes(dir / (std::string(family_name(r.family)) + "_" + scope_name(r.scope) + ".csv"),
                     ranking_csv(r));
}

std::string verdict_line(const Sample& prompt, const Generation& g) {
  const TokenSeq& code = g.tokens;
  const bool synth = g.hit_end && parses(code);
  const bool func = synth && check_functional(prompt.spec, code) == 1;
  std::string s = std::string("synthesizable=") + (synth ? "yes" : "no") +
                  " functional=" + (func ? "yes" : "no");
  if (g.truncated) s += " truncated";
  return s;
}

int cmd_gen_corpus(const RunConfig& cfg) {
  const fs::path out = cfg.out_dir();
  const DatasetManifest corpus =
      generate_corpus_sized(cfg.corpus_seed(), split_total(cfg.corpus_size()), cfg.buggy_fraction());
  write_dataset(corpus, out / kCorpusFile);
  const DatasetManifest eval = generate_prompt_set(cfg.eval_seed(), cfg.eval_size(), kEvalIdBase);
  write_dataset(eval, out / kEvalFile);
  const DatasetManifest val = generate_prompt_set(cfg.val_seed(), cfg.val_size(), kValIdBase);
  write_dataset(val, out / kValFile);
  const auto c = corpus.counts();
  std::printf("corpus: %zu samples (comb %d/%d, seq %d/%d, fsm %d/%d correct/buggy)\n",
              corpus.samples.size(), c[0][1], c[0][0], c[1][1], c[1][0], c[2][1], c[2][0]);
  std::printf("eval: %zu prompts, val: %zu prompts\n", eval.samples.size(), val.samples.size());
  return 0;
}

int cmd_train_lm(const RunConfig& cfg) {
  const DatasetManifest pre = generate_pretraining_corpus(cfg.lm_corpus_seed(), cfg.lm_corpus_size());
  TrainOptions opts = cfg.train();
  const int every = std::max(1, opts.steps / 10);
  opts.on_step = [every, total = opts.steps](int step, double loss) {
    if (step % every == 0 || step + 1 == total)
      std::fprintf(stderr, "step %d/%d loss %.4f\n", step + 1, total, loss);
  };
  TrainReport report;
  const ModelState model = train(cfg.model(), training_examples(pre), opts, &report);
  save_model(model, cfg.out_dir() / kModelFile);
  std::printf("model %s: loss %.4f -> %.4f\n", model.fingerprint().c_str(), report.initial_loss,
              report.final_loss);
  return 0;
}

int cmd_harvest(const RunConfig& cfg) {
  const ModelState model = load_trained(cfg);
  const DatasetManifest corpus = load_dataset(cfg, kCorpusFile);
  HarvestReport report;
  const ActivationStore store = harvest(model, corpus, cfg.policy(), &report);
  export_store(store, cfg.out_dir() / kStoreFile);
  std::printf("activations: %zu records (%s policy), %zu samples skipped\n", store.size(),
              std::string(position_policy_name(cfg.policy())).c_str(), report.skipped.size());
  return 0;
}

int cmd_train_probes(const RunConfig& cfg) {
  const ModelState model = load_trained(cfg);
  const ActivationStore store = import_store(require(cfg, kStoreFile, "harvest"));
  const ExpertBank bank(store, model, cfg.rank());
  const fs::path dir = cfg.out_dir() / kProbeDir;
  fs::create_directories(dir);
  bank.save_probes(dir);
  write_rankings(bank, cfg.out_dir() / kRankingDir);
  std::printf("probes: %zu bundles in %s\n", bank.rankings().size(), dir.string().c_str());
  return 0;
}

int cmd_rank_heads(const RunConfig& cfg) {
  const ModelState model = load_trained(cfg);
  bool trained = false;
  const ExpertBank bank = load_or_train_bank(cfg, model, &trained);
  write_rankings(bank, cfg.out_dir() / kRankingDir);
  for (const auto& r : bank.rankings()) {
    const HeadScore& top = r.entries.front();
    std::printf("%s/%s top head L%d.H%d val %.3f\n", std::string(family_name(r.family)).c_str(),
                scope_name(r.scope).c_str(), top.layer, top.head, top.val_accuracy);
  }
  if (trained) std::printf("probes trained and saved\n");
  return 0;
}

int cmd_build_experts(const RunConfig& cfg) {
  const ModelState model = load_trained(cfg);
  bool trained = false;
  const ExpertBank bank = load_or_train_bank(cfg, model, &trained);
  const ExpertRegistry registry = bank.registry(cfg.family(), cfg.k(), cfg.alpha(),
                                                cfg.steering() == SteeringMode::kDynamic);
  save_registry(registry, cfg.out_dir() / kExpertFile);
  write_file_bytes(cfg.out_dir() / "experts.csv", registry_csv(registry));
  for (const ExpertProfile* p : registry.profiles())
    std::printf("expert %s: %zu heads, alpha %.2f\n", scope_name(p->scope).c_str(), p->heads.size(),
                p->alpha);
  return 0;
}

int cmd_generate(const RunConfig& cfg, int index, const std::string& spec_text, bool steer) {
  const ModelState model = load_trained(cfg);
  Sample prompt;
  if (!spec_text.empty()) {
    prompt.spec = split_tokens(spec_text);
    if (const auto parsed = parse_spec(prompt.spec); std::holds_alternative<SyntaxError>(parsed))
      fail(ErrorCode::kParse, "specification does not parse: " + spec_text);
  } else {
    const DatasetManifest eval = load_dataset(cfg, kEvalFile);
    if (index < 0 || index >= static_cast<int>(eval.samples.size()))
      fail(ErrorCode::kConfig, "--index out of range [0, " +
                                   std::to_string(eval.samples.size()) + ")");
    prompt = eval.samples[static_cast<std::size_t>(index)];
  }
  DecodeOptions decode = cfg.eval().decode;
  std::optional<SteeringPlan> plan;
  DynamicGate gate;
  if (steer) {
    const ExpertRegistry registry = load_registry(require(cfg, kExpertFile, "build-experts"));
    ExpertMode mode = cfg.mode();
    PlanTarget target;
    if (mode == ExpertMode::kRouted) {
      const Scope s = route(registry, prompt.spec);
      target = !s                               ? PlanTarget::kGeneral
               : *s == Category::kCombinational ? PlanTarget::kComb
               : *s == Category::kSequential    ? PlanTarget::kSeq
                                                : PlanTarget::kFsm;
    } else {
      target = plan_target(mode);
    }
    plan = make_plan(registry, target, cfg.alpha(), cfg.steering());
    if (cfg.steering() == SteeringMode::kDynamic) gate = make_dynamic_gate(registry, target);
    std::printf("plan: %s, %zu heads, alpha %.2f\n", std::string(plan_target_name(target)).c_str(),
                plan->entries.size(), plan->alpha);
  }
  const Generation g =
      generate(model, make_prompt(prompt.spec), plan ? &*plan : nullptr, decode, gate);
  std::printf("spec: %s\n", join_tokens(prompt.spec).c_str());
  std::printf("code: %s\n", join_tokens(g.tokens).c_str());
  std::printf("%s\n", verdict_line(prompt, g).c_str());
  return 0;
}

int cmd_evaluate(const RunConfig& cfg) {
  const ModelState model = load_trained(cfg);
  const DatasetManifest eval = load_dataset(cfg, kEvalFile);
  const std::vector<std::uint32_t> training = ids_of(load_dataset(cfg, kCorpusFile));
  const EvalOptions opts = cfg.eval();
  const ExpertMode mode = cfg.mode();

  ExperimentResult base = evaluate(model, nullptr, eval, opts, {}, training);
  base.spec.model_id = model.fingerprint();
  std::vector<ExperimentResult> results{base};
  std::optional<SteeringPlan> plan;
  if (mode != ExpertMode::kBase) {
    const ExpertRegistry registry = load_registry(require(cfg, kExpertFile, "build-experts"));
    ExperimentResult r;
    if (mode == ExpertMode::kRouted) {
      r = evaluate_routed(model, registry, cfg.alpha(), cfg.steering(), eval, opts, training);
    } else {
      const PlanTarget target = plan_target(mode);
      plan = make_plan(registry, target, cfg.alpha(), cfg.steering());
      DynamicGate gate;
      if (cfg.steering() == SteeringMode::kDynamic) gate = make_dynamic_gate(registry, target);
      r = evaluate(model, &*plan, eval, opts, gate, training);
    }
    r.spec.family = cfg.family();
    r.spec.k = cfg.k();
    r.spec.alpha = cfg.alpha();
    r.spec.mode = mode;
    r.spec.steering = cfg.steering();
    r.spec.model_id = model.fingerprint();
    r.overhead_pct = base.mean_s > 0 ? 100.0 * (r.mean_s - base.mean_s) / base.mean_s : 0.0;
    results.push_back(r);
  }
  write_file_bytes(cfg.out_dir() / "evaluate.csv", results_csv(results));
  std::printf("%s\n", std::string(kResultsHeader).c_str());
  for (const auto& r : results) std::printf("%s\n", result_row(r).c_str());
  if (plan) {
    const std::string text = overhead_text(overhead_report(base, results[1], *plan, model.config()));
    write_file_bytes(cfg.out_dir() / "overhead.txt", text);
    std::printf("%s", text.c_str());
  }
  return 0;
}

int cmd_grid(const RunConfig& cfg, bool resume, const std::string& on) {
  const ModelState model = load_trained(cfg);
  bool trained = false;
  const ExpertBank bank = load_or_train_bank(cfg, model, &trained);
  if (on != "val" && on != "eval") fail(ErrorCode::kConfig, "--on must be val or eval");
  const DatasetManifest prompts = load_dataset(cfg, on == "val" ? kValFile : kEvalFile);
  GridOptions opts;
  opts.workers = cfg.workers();
  opts.work_dir = cfg.out_dir() / kGridDir;
  opts.resume = resume;
  opts.eval = cfg.eval();
  opts.training_ids = ids_of(load_dataset(cfg, kCorpusFile));
  const GridDefinition grid = cfg.grid();
  std::size_t done = 0;
  opts.on_cell = [&](const ExperimentResult& r, bool resumed) {
    ++done;
    std::fprintf(stderr, "[%zu/%zu] %s func %.2f%s\n", done, grid.size() + 1, r.spec.key().c_str(),
                 r.func_pct, resumed ? " (resumed)" : "");
  };
  const GridOutcome outcome = run_grid(model, bank, prompts, grid, opts);
  write_file_bytes(opts.work_dir / "results.csv", results_csv(outcome.results));
  std::printf("grid: %zu cells on %s prompts, %d resumed, %zu failed\n", outcome.results.size(),
              on.c_str(), outcome.resumed, outcome.failures.size());
  for (const auto& f : outcome.failures) std::printf("failed %s\n", f.c_str());
  return outcome.failures.empty() ? 0 : static_cast<int>(ErrorCode::kData);
}

int cmd_report(const RunConfig& cfg) {
  const ModelState model = load_trained(cfg);
  bool trained = false;
  const ExpertBank bank = load_or_train_bank(cfg, model, &trained);
  const fs::path results = cfg.out_dir() / kGridDir / "results.csv";
  ReportInputs in;
  if (fs::exists(results)) in.results = parse_results_csv(read_file_bytes(results));
  in.rankings = bank.rankings();
  in.bank = &bank;
  in.layer_split_k = cfg.k();
  const auto files = emit_reports(in, cfg.out_dir() / kReportDir);
  for (const auto& f : files) std::printf("%s\n", f.string().c_str());
  return 0;
}

int cmd_rtl_eval(const RunConfig& cfg, const std::string& dir) {
  if (dir.empty() || !fs::is_directory(dir))
    fail(ErrorCode::kMissingArtifact, "--dir must name a directory of .v files");
  std::vector<RtlSample> samples;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const fs::path p = e.path();
    if (p.extension() == ".v" && p.stem().string().find("_tb") == std::string::npos)
      files.push_back(p);
  }
  std::sort(files.begin(), files.end());
  for (const auto& p : files) {
    RtlSample s;
    s.id = p.stem().string();
    s.verilog = read_file_bytes(p);
    const fs::path tb = p.parent_path() / (s.id + "_tb.v");
    if (fs::exists(tb)) s.testbench = read_file_bytes(tb);
    samples.push_back(std::move(s));
  }
  ExternalToolConfig tools = cfg.rtl();
  tools.archive_dir = cfg.out_dir() / "rtl_eval";
  ExperimentResult summary;
  const auto verdicts = external_rtl_eval(samples, tools, &summary);
  std::string csv = "id,synthesizable,functional,timed_out\n";
  for (const auto& v : verdicts)
    csv += v.id + "," + std::to_string(v.synthesizable) + "," + std::to_string(v.functional) + "," +
           std::to_string(v.timed_out) + "\n";
  write_file_bytes(cfg.out_dir() / "rtl_eval.csv", csv);
  std::printf("%s", csv.c_str());
  std::printf("synth %.2f%% func %.2f%% over %d samples\n", summary.synth_pct, summary.func_pct,
              summary.n_eval);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"meltrtl: probe-guided activation steering for mini-HDL generation"};
  app.require_subcommand(1);

  CommonFlags common;
  SteerFlags steer;
  bool resume = false;
  int index = 0;
  std::string spec_text, grid_on = "val", rtl_dir;
  std::optional<double> gen_alpha;

  auto* gen_corpus = app.add_subcommand("gen-corpus", "write probe corpus, eval and val prompts");
  auto* train_lm = app.add_subcommand("train-lm", "train the language model");
  auto* harvest_cmd = app.add_subcommand("harvest", "capture per-head activations");
  auto* train_probes = app.add_subcommand("train-probes", "train probes for every head");
  auto* rank = app.add_subcommand("rank-heads", "rank heads by probe accuracy");
  auto* build = app.add_subcommand("build-experts", "assemble expert profiles");
  auto* gen = app.add_subcommand("generate", "generate code for one prompt");
  auto* eval = app.add_subcommand("evaluate", "score Base and one steered cell");
  auto* grid = app.add_subcommand("grid", "run the (family, K, alpha, mode) grid");
  auto* report = app.add_subcommand("report", "emit heatmaps and tables");
  auto* rtl = app.add_subcommand("rtl-eval", "score Verilog files with external tools");

  for (auto* c : {gen_corpus, train_lm, harvest_cmd, train_probes, rank, build, gen, eval, grid,
                  report, rtl})
    add_common(c, common);
  harvest_cmd->add_option("--policy", steer.policy, "last-code, mean-code or sep");
  for (auto* c : {build, eval, report}) add_steer(c, steer);
  gen->add_option("--family", steer.family, "probe family: lr, mlp or svc");
  gen->add_option("--mode", steer.mode, "general, comb, seq, fsm, multi or routed");
  gen->add_flag("--dynamic", steer.dynamic, "probe-gated steering");
  gen->add_option("--alpha", gen_alpha, "steer with the built experts at this strength");
  gen->add_flag("--steer", "steer with the built experts at their own strength");
  gen->add_option("--index", index, "eval prompt index");
  gen->add_option("--spec", spec_text, "specification tokens, space separated");
  grid->add_flag("--resume", resume, "continue from the journal");
  int workers = 0;
  grid->add_option("--workers", workers, "parallel cells");
  grid->add_option("--on", grid_on, "prompt set: val (default) or eval");
  rtl->add_option("--dir", rtl_dir, "directory of <id>.v files with optional <id>_tb.v");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ErrorCode::kConfig);
  }

  try {
    if (*gen_corpus) return cmd_gen_corpus(load_config(common));
    if (*train_lm) return cmd_train_lm(load_config(common));
    if (*harvest_cmd) return cmd_harvest(load_config(common, &steer));
    if (*train_probes) return cmd_train_probes(load_config(common));
    if (*rank) return cmd_rank_heads(load_config(common));
    if (*build) return cmd_build_experts(load_config(common, &steer));
    if (*gen) {
      const bool use_plan = gen_alpha.has_value() || gen->count("--steer") > 0;
      if (gen_alpha) steer.alpha = gen_alpha;
      return cmd_generate(load_config(common, &steer), index, spec_text, use_plan);
    }
    if (*eval) return cmd_evaluate(load_config(common, &steer));
    if (*grid) {
      if (workers > 0) common.sets.push_back("grid.workers=" + std::to_string(workers));
      return cmd_grid(load_config(common), resume, grid_on);
    }
    if (*report) return cmd_report(load_config(common, &steer));
    if (*rtl) return cmd_rtl_eval(load_config(common), rtl_dir);
  } catch (const Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", error_code_name(e.code()), e.what());
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
