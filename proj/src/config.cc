#include "meltrtl/config.h"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <sstream>

#include "meltrtl/binio.h"
#include "meltrtl/error.h"
#include "meltrtl/rng.h"

namespace meltrtl {
namespace {

// "auto" seeds derive from the master seed and the key name.
const std::map<std::string, std::string, std::less<>>& defaults() {
  static const std::map<std::string, std::string, std::less<>> d = {
      {"seed", "0"},
      {"model.layers", "6"},
      {"model.heads", "8"},
      {"model.d_model", "64"},
      {"model.context", "96"},
      {"model.seed", "auto"},
      {"lm.corpus_size", "20000"},
      {"lm.corpus_seed", "auto"},
      {"lm.steps", "600"},
      {"lm.batch", "32"},
      {"lm.lr", "0.003"},
      {"lm.warmup", "100"},
      {"lm.seed", "auto"},
      {"corpus.size", "200"},
      {"corpus.seed", "auto"},
      {"corpus.buggy_fraction", "0.5"},
      {"harvest.policy", "last-code"},
      {"probe.train_fraction", "0.7"},
      {"probe.split_seed", "auto"},
      {"probe.max_iter", "1000"},
      {"probe.l2", "0.01"},
      {"probe.mlp_hidden", "64"},
      {"probe.mlp_lr", "0.01"},
      {"probe.mlp_seed", "auto"},
      {"probe.svc_c", "1"},
      {"probe.svc_gamma", "auto"},
      {"probe.svc_tol", "0.001"},
      {"steer.family", "lr"},
      {"steer.k", "10"},
      {"steer.alpha", "2.0"},
      {"steer.mode", "multi"},
      {"steer.gating", "static"},
      {"steer.positions", "generated"},
      {"eval.size", "150"},
      {"eval.seed", "auto"},
      {"eval.max_new", "64"},
      {"eval.warmup", "3"},
      {"eval.repetitions", "1"},
      {"val.size", "100"},
      {"val.seed", "auto"},
      {"grid.families", "lr,mlp,svc"},
      {"grid.k", "5,10,15,20,25,30,35,40,45,48"},
      {"grid.alpha", "0.1,0.5,1.0,1.5,2.0,2.5,3.0,3.5,4.0,4.5,5.0"},
      {"grid.modes", "multi"},
      {"grid.workers", "1"},
      {"out_dir", "meltrtl_out"},
      {"rtl.synth", ""},
      {"rtl.compile", ""},
      {"rtl.run", ""},
      {"rtl.pass_marker", "ALL TESTS PASSED"},
      {"rtl.timeout", "30"},
  };
  return d;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] void bad_value(std::string_view key, const std::string& value, std::string_view want) {
  fail(ErrorCode::kConfig, "config key '" + std::string(key) + "': '" + value + "' is not " +
                               std::string(want));
}

double to_double(std::string_view key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
    bad_value(key, v, "a finite number");
  return out;
}

long long to_ll(std::string_view key, const std::string& v) {
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

template <typename F>
auto checked(std::string_view key, const std::string& value, F&& f) {
  try {
    return f(value);
  } catch (const Error& e) {
    fail(ErrorCode::kConfig, "config key '" + std::string(key) + "': " + e.what());
  }
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& [k, v] : defaults()) values_.emplace(k, v);
  if (const char* env = std::getenv(kOutDirEnv); env && *env) values_["out_dir"] = env;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, v] : defaults()) out.push_back(k);
  return out;
}

void RunConfig::set(std::string_view key, std::string_view value) {
  const auto it = values_.find(key);
  if (it == values_.end()) fail(ErrorCode::kConfig, "unknown config key '" + std::string(key) + "'");
  it->second = trim(value);
}

void RunConfig::set_assignment(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos)
    fail(ErrorCode::kConfig, "expected key=value, got '" + std::string(assignment) + "'");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void RunConfig::merge_text(std::string_view text, std::string_view origin) {
  std::istringstream in{std::string(text)};
  int n = 0;
  for (std::string line; std::getline(in, line);) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorCode::kConfig, std::string(origin) + ":" + std::to_string(n) +
                                   ": expected 'key = value'");
    try {
      set(trim(std::string_view(line).substr(0, eq)), std::string_view(line).substr(eq + 1));
    } catch (const Error& e) {
      fail(ErrorCode::kConfig, std::string(origin) + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  merge_text(read_file_bytes(path), path.string());
}

const std::string& RunConfig::get(std::string_view key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) fail(ErrorCode::kConfig, "unknown config key '" + std::string(key) + "'");
  return it->second;
}

int RunConfig::get_int(std::string_view key) const {
  const long long v = to_ll(key, get(key));
  if (v < INT32_MIN || v > INT32_MAX) bad_value(key, get(key), "within int range");
  return static_cast<int>(v);
}

std::uint64_t RunConfig::get_u64(std::string_view key) const {
  const std::string& v = get(key);
  if (v == "auto") {
    std::uint64_t salt = 0xcbf29ce484222325ULL;
    for (char c : key) salt = (salt ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
    return Rng::mix(get_u64("seed"), salt);
  }
  const long long x = to_ll(key, v);
  if (x < 0) bad_value(key, v, "a non-negative integer");
  return static_cast<std::uint64_t>(x);
}

double RunConfig::get_double(std::string_view key) const { return to_double(key, get(key)); }

ModelConfig RunConfig::model() const {
  ModelConfig c;
  c.n_layers = get_int("model.layers");
  c.n_heads = get_int("model.heads");
  c.d_model = get_int("model.d_model");
  c.max_context = get_int("model.context");
  c.seed = get_u64("model.seed");
  return c;
}

TrainOptions RunConfig::train() const {
  TrainOptions o;
  o.steps = get_int("lm.steps");
  o.batch_size = get_int("lm.batch");
  o.learning_rate = get_double("lm.lr");
  o.warmup_steps = get_int("lm.warmup");
  o.seed = get_u64("lm.seed");
  return o;
}

int RunConfig::lm_corpus_size() const { return get_int("lm.corpus_size"); }
std::uint64_t RunConfig::lm_corpus_seed() const { return get_u64("lm.corpus_seed"); }
std::uint64_t RunConfig::corpus_seed() const { return get_u64("corpus.seed"); }
int RunConfig::corpus_size() const { return get_int("corpus.size"); }
double RunConfig::buggy_fraction() const { return get_double("corpus.buggy_fraction"); }

PositionPolicy RunConfig::policy() const {
  return checked("harvest.policy", get("harvest.policy"),
                 [](const std::string& v) { return position_policy_from_name(v); });
}

RankOptions RunConfig::rank() const {
  RankOptions o;
  o.train_fraction = get_double("probe.train_fraction");
  o.split_seed = get_u64("probe.split_seed");
  const int iters = get_int("probe.max_iter");
  const double l2 = get_double("probe.l2");
  o.probe.lr.max_iter = iters;
  o.probe.lr.l2 = l2;
  o.probe.mlp.max_iter = iters;
  o.probe.mlp.l2 = l2;
  o.probe.mlp.hidden = get_int("probe.mlp_hidden");
  o.probe.mlp.learning_rate = get_double("probe.mlp_lr");
  o.probe.mlp.seed = get_u64("probe.mlp_seed");
  o.probe.svc.C = get_double("probe.svc_c");
  o.probe.svc.gamma = get("probe.svc_gamma") == "auto" ? 0.0 : get_double("probe.svc_gamma");
  o.probe.svc.tol = get_double("probe.svc_tol");
  return o;
}

ProbeFamily RunConfig::family() const {
  return checked("steer.family", get("steer.family"),
                 [](const std::string& v) { return family_from_name(v); });
}
int RunConfig::k() const { return get_int("steer.k"); }
double RunConfig::alpha() const { return get_double("steer.alpha"); }
ExpertMode RunConfig::mode() const {
  return checked("steer.mode", get("steer.mode"),
                 [](const std::string& v) { return expert_mode_from_name(v); });
}

SteeringMode RunConfig::steering() const {
  const std::string& v = get("steer.gating");
  if (v == "static") return SteeringMode::kStatic;
  if (v == "dynamic") return SteeringMode::kDynamic;
  bad_value("steer.gating", v, "static or dynamic");
}

SteerScope RunConfig::steer_scope() const {
  const std::string& v = get("steer.positions");
  if (v == "generated") return SteerScope::kGenerated;
  if (v == "all") return SteerScope::kAll;
  bad_value("steer.positions", v, "generated or all");
}

EvalOptions RunConfig::eval() const {
  EvalOptions o;
  o.decode.max_new = get_int("eval.max_new");
  o.decode.scope = steer_scope();
  o.warmup = get_int("eval.warmup");
  o.repetitions = get_int("eval.repetitions");
  return o;
}

std::uint64_t RunConfig::eval_seed() const { return get_u64("eval.seed"); }
int RunConfig::eval_size() const { return get_int("eval.size"); }
std::uint64_t RunConfig::val_seed() const { return get_u64("val.seed"); }
int RunConfig::val_size() const { return get_int("val.size"); }

GridDefinition RunConfig::grid() const {
  GridDefinition g;
  for (const auto& f : split_list(get("grid.families")))
    g.families.push_back(
        checked("grid.families", f, [](const std::string& v) { return family_from_name(v); }));
  for (const auto& k : split_list(get("grid.k"))) {
    const long long v = to_ll("grid.k", k);
    if (v < 1 || v > INT32_MAX) bad_value("grid.k", k, "a positive integer");
    g.ks.push_back(static_cast<int>(v));
  }
  for (const auto& a : split_list(get("grid.alpha"))) g.alphas.push_back(to_double("grid.alpha", a));
  for (const auto& m : split_list(get("grid.modes")))
    g.modes.push_back(
        checked("grid.modes", m, [](const std::string& v) { return expert_mode_from_name(v); }));
  g.steering = steering();
  return g;
}

int RunConfig::workers() const { return get_int("grid.workers"); }
std::filesystem::path RunConfig::out_dir() const { return get("out_dir"); }

ExternalToolConfig RunConfig::rtl() const {
  ExternalToolConfig c;
  c.synth_command = get("rtl.synth");
  c.compile_command = get("rtl.compile");
  c.run_command = get("rtl.run");
  c.pass_marker = get("rtl.pass_marker");
  c.timeout_s = get_double("rtl.timeout");
  return c;
}

void RunConfig::validate() const {
  const auto positive = [&](std::string_view key) {
    if (get_int(key) < 1) bad_value(key, get(key), "a positive integer");
  };
  for (const char* k : {"model.layers", "model.heads", "model.d_model", "model.context",
                        "lm.corpus_size", "lm.steps", "lm.batch", "corpus.size", "probe.max_iter",
                        "probe.mlp_hidden", "eval.size", "val.size", "eval.max_new",
                        "eval.repetitions", "grid.workers"})
    positive(k);
  if (get_int("lm.warmup") < 0) bad_value("lm.warmup", get("lm.warmup"), "non-negative");
  if (get_int("eval.warmup") < 0) bad_value("eval.warmup", get("eval.warmup"), "non-negative");
  for (const char* k : {"seed", "model.seed", "lm.corpus_seed", "lm.seed", "corpus.seed",
                        "probe.split_seed", "probe.mlp_seed", "eval.seed", "val.seed"})
    get_u64(k);
  checked("model.*", "", [&](const std::string&) {
    model().validate();
    return 0;
  });
  if (get_double("lm.lr") <= 0) bad_value("lm.lr", get("lm.lr"), "positive");
  const double bf = buggy_fraction();
  if (bf < 0 || bf > 1) bad_value("corpus.buggy_fraction", get("corpus.buggy_fraction"), "in [0, 1]");
  const double tf = get_double("probe.train_fraction");
  if (tf <= 0 || tf >= 1) bad_value("probe.train_fraction", get("probe.train_fraction"), "in (0, 1)");
  if (get_double("probe.l2") < 0) bad_value("probe.l2", get("probe.l2"), "non-negative");
  if (get_double("probe.mlp_lr") <= 0) bad_value("probe.mlp_lr", get("probe.mlp_lr"), "positive");
  if (get_double("probe.svc_c") <= 0) bad_value("probe.svc_c", get("probe.svc_c"), "positive");
  if (get("probe.svc_gamma") != "auto" && get_double("probe.svc_gamma") <= 0)
    bad_value("probe.svc_gamma", get("probe.svc_gamma"), "auto or positive");
  if (get_double("probe.svc_tol") <= 0) bad_value("probe.svc_tol", get("probe.svc_tol"), "positive");
  policy();
  family();
  mode();
  steering();
  steer_scope();
  const int heads = get_int("model.layers") * get_int("model.heads");
  if (k() < 1 || k() > heads)
    bad_value("steer.k", get("steer.k"), "in [1, layers x heads]");
  if (alpha() < 0) bad_value("steer.alpha", get("steer.alpha"), "non-negative");
  checked("grid.*", "", [&](const std::string&) {
    grid().validate();
    return 0;
  });
  if (get_double("rtl.timeout") <= 0) bad_value("rtl.timeout", get("rtl.timeout"), "positive");
  if (get("out_dir").empty()) bad_value("out_dir", "", "a directory");
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

}  // namespace meltrtl
