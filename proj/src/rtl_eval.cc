#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "meltrtl/error.h"
#include "meltrtl/evalbench.h"

namespace meltrtl {
namespace {

namespace fs = std::filesystem;

struct RunOutcome {
  int exit_code = -1;
  bool timed_out = false;
};

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'')
      out += "'\\''";
    else
      out += c;
  }
  return out + "'";
}

std::string expand(std::string cmd, const std::map<std::string, fs::path>& vars) {
  for (const auto& [name, value] : vars) {
    const std::string key = "{" + name + "}";
    for (std::size_t p; (p = cmd.find(key)) != std::string::npos;)
      cmd.replace(p, key.size(), shell_quote(value.string()));
  }
  return cmd;
}

bool executable(const fs::path& p) { return ::access(p.c_str(), X_OK) == 0 && fs::is_regular_file(p); }

bool tool_available(const std::string& command) {
  std::istringstream in(command);
  std::string tool;
  in >> tool;
  if (tool.empty()) return false;
  if (tool.find('/') != std::string::npos) return executable(tool);
  const char* path = std::getenv("PATH");
  std::istringstream dirs(path ? path : "");
  for (std::string dir; std::getline(dirs, dir, ':');)
    if (!dir.empty() && executable(fs::path(dir) / tool)) return true;
  return false;
}

RunOutcome run_command(const std::string& cmd, const fs::path& out, const fs::path& err,
                       double timeout_s) {
  const pid_t pid = ::fork();
  if (pid < 0) fail(ErrorCode::kIo, "fork failed");
  if (pid == 0) {
    ::setpgid(0, 0);
    const int fo = ::open(out.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    const int fe = ::open(err.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fo < 0 || fe < 0) ::_exit(127);
    ::dup2(fo, 1);
    ::dup2(fe, 2);
    ::execl("/bin/sh", "sh", "-c", cmd.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  const auto deadline = std::chrono::steady_clock::now() +
                        std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                            std::chrono::duration<double>(timeout_s));
  RunOutcome r;
  int status = 0;
  while (true) {
    const pid_t w = ::waitpid(pid, &status, WNOHANG);
    if (w == pid) break;
    if (std::chrono::steady_clock::now() >= deadline) {
      ::kill(-pid, SIGKILL);
      ::kill(pid, SIGKILL);
      ::waitpid(pid, &status, 0);
      r.timed_out = true;
      return r;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string read_all(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorCode::kIo, "cannot write " + p.string());
  f << text;
}

}  // namespace

std::vector<RtlVerdict> external_rtl_eval(const std::vector<RtlSample>& samples,
                                          const ExternalToolConfig& config,
                                          ExperimentResult* summary) {
  if (config.synth_command.empty())
    fail(ErrorCode::kCapability, "rtl-eval: no synthesis command configured");
  bool needs_sim = false;
  for (const auto& s : samples) needs_sim = needs_sim || !s.testbench.empty();
  std::vector<std::string> required = {config.synth_command};
  if (needs_sim) {
    if (config.compile_command.empty() || config.run_command.empty())
      fail(ErrorCode::kCapability, "rtl-eval: testbenches given but no simulator configured");
    required.push_back(config.compile_command);
    required.push_back(config.run_command);
  }
  for (const auto& cmd : required)
    if (!tool_available(cmd))
      fail(ErrorCode::kCapability, "rtl-eval: tool for '" + cmd + "' not found on PATH");
  require(config.timeout_s > 0, "rtl-eval: timeout must be positive");

  fs::path root = config.archive_dir;
  if (root.empty()) root = fs::temp_directory_path() / ("meltrtl_rtl_" + std::to_string(::getpid()));
  std::vector<RtlVerdict> out;
  for (const auto& s : samples) {
    require(!s.id.empty() && s.id.find('/') == std::string::npos, "rtl-eval: bad sample id");
    const fs::path dir = root / s.id;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorCode::kIo, "rtl-eval: cannot create " + dir.string());
    const fs::path design = dir / "design.v", tb = dir / "tb.v", sim = dir / "sim.out";
    write_file(design, s.verilog);
    RtlVerdict v;
    v.id = s.id;
    const RunOutcome syn = run_command(expand(config.synth_command, {{"file", design}}),
                                       dir / "synth.stdout", dir / "synth.stderr",
                                       config.timeout_s);
    v.timed_out = syn.timed_out;
    v.synthesizable = !syn.timed_out && syn.exit_code == 0;
    if (v.synthesizable && !s.testbench.empty()) {
      write_file(tb, s.testbench);
      const std::map<std::string, fs::path> vars = {{"file", design}, {"tb", tb}, {"out", sim}};
      const RunOutcome comp = run_command(expand(config.compile_command, vars),
                                          dir / "compile.stdout", dir / "compile.stderr",
                                          config.timeout_s);
      v.timed_out = v.timed_out || comp.timed_out;
      if (!comp.timed_out && comp.exit_code == 0) {
        const RunOutcome run = run_command(expand(config.run_command, vars), dir / "run.stdout",
                                           dir / "run.stderr", config.timeout_s);
        v.timed_out = v.timed_out || run.timed_out;
        v.functional = !run.timed_out && run.exit_code == 0 &&
                       read_all(dir / "run.stdout").find(config.pass_marker) != std::string::npos;
      }
    }
    out.push_back(v);
  }
  if (summary) {
    *summary = ExperimentResult{};
    summary->n_eval = static_cast<int>(out.size());
    int syn = 0, fun = 0;
    for (const auto& v : out) {
      syn += v.synthesizable;
      fun += v.functional;
      summary->synthesizable.push_back(v.synthesizable);
      summary->functional.push_back(v.functional);
    }
    const double n = std::max<double>(1.0, static_cast<double>(out.size()));
    summary->synth_pct = 100.0 * syn / n;
    summary->func_pct = 100.0 * fun / n;
    summary->func_by_category.fill(std::nan(""));
    summary->overhead_pct = std::nan("");
  }
  return out;
}

}  // namespace meltrtl
