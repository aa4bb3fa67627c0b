#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <tuple>

#include "meltrtl/error.h"
#include "meltrtl/evalbench.h"

namespace meltrtl {
namespace {

namespace fs = std::filesystem;

constexpr int kHistogramBins = 20;
const Scope kReportScopes[] = {std::nullopt, Category::kCombinational, Category::kSequential,
                               Category::kFsm};

void write_text(const fs::path& path, std::string_view text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorCode::kIo, "cannot write " + path.string());
  f << text;
  if (!f) fail(ErrorCode::kIo, "write failed for " + path.string());
}

std::string num(const char* f, double v) {
  if (std::isnan(v)) return "nan";
  char buf[48];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string mode_label(const ExperimentSpec& s) {
  std::string m(expert_mode_name(s.mode));
  if (s.mode != ExpertMode::kBase && s.steering == SteeringMode::kDynamic) m += ":dynamic";
  return m;
}

std::string ranking_stem(const HeadRanking& r) {
  return std::string(family_name(r.family)) + "_" + scope_name(r.scope);
}

// Dark blue (low) to yellow (high).
std::string heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(30 + t * 223));
  const int g = static_cast<int>(std::lround(30 + t * 201));
  const int b = static_cast<int>(std::lround(120 - t * 90));
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

std::string heatmap_svg(const HeadRanking& r, const std::vector<std::vector<double>>& m) {
  constexpr int kCell = 36, kPad = 60;
  const int w = kPad + r.n_heads * kCell + 20, h = kPad + r.n_layers * kCell + 20;
  double lo = 1.0, hi = 0.0;
  for (const auto& row : m)
    for (double v : row) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  const double span = hi > lo ? hi - lo : 1.0;
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) +
                  "\" height=\"" + std::to_string(h) + "\" font-family=\"sans-serif\" " +
                  "font-size=\"10\">\n";
  s += "<text x=\"4\" y=\"16\" font-size=\"12\">" + ranking_stem(r) +
       " validation accuracy (rows: layer, columns: head)</text>\n";
  for (int hd = 0; hd < r.n_heads; ++hd)
    s += "<text x=\"" + std::to_string(kPad + hd * kCell + kCell / 2 - 3) + "\" y=\"" +
         std::to_string(kPad - 6) + "\">" + std::to_string(hd) + "</text>\n";
  for (int l = 0; l < r.n_layers; ++l) {
    const int y = kPad + l * kCell;
    s += "<text x=\"" + std::to_string(kPad - 20) + "\" y=\"" + std::to_string(y + kCell / 2 + 3) +
         "\">" + std::to_string(l) + "</text>\n";
    for (int hd = 0; hd < r.n_heads; ++hd) {
      const double v = m[l][hd];
      const int x = kPad + hd * kCell;
      s += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) + "\" width=\"" +
           std::to_string(kCell) + "\" height=\"" + std::to_string(kCell) + "\" fill=\"" +
           heat_color((v - lo) / span) + "\"/>\n";
      s += "<text x=\"" + std::to_string(x + 4) + "\" y=\"" + std::to_string(y + kCell / 2 + 3) +
           "\" fill=\"" + ((v - lo) / span > 0.5 ? "black" : "white") + "\">" +
           num("%.2f", v) + "</text>\n";
    }
  }
  return s + "</svg>\n";
}

std::string alpha_sweep_csv(const std::vector<ExperimentResult>& results) {
  using Key = std::tuple<int, int, std::string>;
  std::map<Key, std::map<double, const ExperimentResult*>> series;
  for (const auto& r : results) {
    if (r.spec.mode == ExpertMode::kBase) continue;
    series[{static_cast<int>(r.spec.family), r.spec.k, mode_label(r.spec)}][r.spec.alpha] = &r;
  }
  std::string out = "family,K,mode,alpha,synth_pct,func_pct\n";
  for (const auto& [key, by_alpha] : series)
    for (const auto& [alpha, r] : by_alpha)
      out += std::string(family_name(static_cast<ProbeFamily>(std::get<0>(key)))) + "," +
             std::to_string(std::get<1>(key)) + "," + std::get<2>(key) + "," +
             num("%.2f", alpha) + "," + num("%.2f", r->synth_pct) + "," +
             num("%.2f", r->func_pct) + "\n";
  return out;
}

// Histograms of activation L2 norms at each family's best general head, split
// by that family's predicted class.
std::string norm_histogram_csv(const ExpertBank& bank) {
  std::string out = "family,layer,head,predicted_class,bin_lo,bin_hi,count\n";
  const ActivationStore& store = bank.store();
  for (ProbeFamily f : kAllFamilies) {
    const HeadScore& top = bank.ranking(f, std::nullopt).entries.front();
    const ProbeModel& probe =
        bank.probes(f, std::nullopt)[static_cast<std::size_t>(top.layer) * store.n_heads() +
                                     top.head];
    const auto& group = store.group(top.layer, top.head);
    if (group.empty() || probe.dim == 0) continue;
    std::vector<double> norms;
    std::vector<int> cls;
    for (const auto& r : group) {
      norms.push_back(l2_norm(r.vector));
      cls.push_back(predict(probe, r.vector).cls);
    }
    const double lo = *std::min_element(norms.begin(), norms.end());
    double hi = *std::max_element(norms.begin(), norms.end());
    if (hi <= lo) hi = lo + 1.0;
    const double width = (hi - lo) / kHistogramBins;
    for (int c = 0; c < 2; ++c) {
      std::vector<int> counts(kHistogramBins, 0);
      for (std::size_t i = 0; i < norms.size(); ++i)
        if (cls[i] == c)
          ++counts[std::min(kHistogramBins - 1, static_cast<int>((norms[i] - lo) / width))];
      for (int b = 0; b < kHistogramBins; ++b)
        out += std::string(family_name(f)) + "," + std::to_string(top.layer) + "," +
               std::to_string(top.head) + "," + std::to_string(c) + "," +
               num("%.6f", lo + b * width) + "," + num("%.6f", lo + (b + 1) * width) + "," +
               std::to_string(counts[b]) + "\n";
    }
  }
  return out;
}

// Coordinates of every activation at the best general LR head along the
// probe's raw-space weight direction u and the unit part of the class-mean
// difference orthogonal to u, followed by the two class means.
std::string projection_csv(const ExpertBank& bank) {
  std::string out = "kind,sample_id,label,category,u,v\n";
  const ActivationStore& store = bank.store();
  const HeadScore& top = bank.ranking(ProbeFamily::kLr, std::nullopt).entries.front();
  const ProbeModel& probe = bank.probes(ProbeFamily::kLr, std::nullopt)[
      static_cast<std::size_t>(top.layer) * store.n_heads() + top.head];
  const auto& group = store.group(top.layer, top.head);
  if (group.empty() || probe.w.empty()) return out;
  const std::size_t d = probe.w.size();
  Vec u(d);
  for (std::size_t i = 0; i < d; ++i) u[i] = probe.w[i] / probe.scale[i];
  if (l2_norm(u) == 0.0) return out;
  u = normalized(u);
  Vec mean[2] = {Vec(d, 0.0), Vec(d, 0.0)};
  int count[2] = {0, 0};
  for (const auto& r : group) {
    for (std::size_t i = 0; i < d; ++i) mean[r.label][i] += r.vector[i];
    ++count[r.label];
  }
  for (int c = 0; c < 2; ++c)
    for (double& x : mean[c]) x /= std::max(count[c], 1);
  Vec v(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = mean[1][i] - mean[0][i];
  double along = 0.0;
  for (std::size_t i = 0; i < d; ++i) along += v[i] * u[i];
  for (std::size_t i = 0; i < d; ++i) v[i] -= along * u[i];
  if (l2_norm(v) < 1e-12 * std::max(1.0, l2_norm(mean[1]))) {
    // Any unit vector orthogonal to u.
    const std::size_t j = static_cast<std::size_t>(
        std::min_element(u.begin(), u.end(), [](double a, double b) {
          return std::abs(a) < std::abs(b);
        }) - u.begin());
    v.assign(d, 0.0);
    v[j] = 1.0;
    for (std::size_t i = 0; i < d; ++i) v[i] -= u[j] * u[i];
  }
  v = normalized(v);
  const auto coords = [&](std::span<const double> x) {
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      a += x[i] * u[i];
      b += x[i] * v[i];
    }
    return std::pair(a, b);
  };
  for (const auto& r : group) {
    const auto [a, b] = coords(r.vector);
    out += "sample," + std::to_string(r.sample_id) + "," + std::to_string(r.label) + "," +
           std::string(category_name(r.category)) + "," + num("%.6f", a) + "," +
           num("%.6f", b) + "\n";
  }
  for (int c = 0; c < 2; ++c) {
    const auto [a, b] = coords(mean[c]);
    out += "mean,," + std::to_string(c) + ",," + num("%.6f", a) + "," + num("%.6f", b) + "\n";
  }
  return out;
}

}  // namespace

std::vector<std::vector<double>> heatmap_matrix(const HeadRanking& ranking) {
  std::vector<std::vector<double>> m(ranking.n_layers, std::vector<double>(ranking.n_heads, 0.0));
  for (const auto& e : ranking.entries) m.at(e.layer).at(e.head) = e.val_accuracy;
  return m;
}

std::vector<LayerShare> layer_distribution(const std::vector<HeadRanking>& rankings, int k) {
  std::vector<LayerShare> out;
  for (const auto& r : rankings) {
    const int kk = std::min<int>(k, static_cast<int>(r.entries.size()));
    if (kk <= 0) continue;
    int first = 0;
    for (int i = 0; i < kk; ++i) first += 2 * r.entries[i].layer < r.n_layers;
    LayerShare s{r.family, r.scope};
    s.first_half_pct = 100.0 * first / kk;
    s.second_half_pct = 100.0 - s.first_half_pct;
    out.push_back(s);
  }
  return out;
}

std::string leaderboard_csv(const std::vector<ExperimentResult>& results, int n) {
  std::vector<const ExperimentResult*> cells;
  for (const auto& r : results)
    if (r.spec.mode != ExpertMode::kBase) cells.push_back(&r);
  std::string out = "metric,position,rank,family,K,alpha,mode,synth_pct,func_pct\n";
  for (const char* metric : {"func", "synth"}) {
    const bool func = metric[0] == 'f';
    std::vector<const ExperimentResult*> sorted = cells;
    std::stable_sort(sorted.begin(), sorted.end(), [&](const auto* a, const auto* b) {
      return (func ? a->func_pct : a->synth_pct) > (func ? b->func_pct : b->synth_pct);
    });
    const int m = std::min<int>(n, static_cast<int>(sorted.size()));
    const auto emit = [&](const char* pos, int rank, const ExperimentResult& r) {
      out += std::string(metric) + "," + pos + "," + std::to_string(rank) + "," +
             std::string(family_name(r.spec.family)) + "," + std::to_string(r.spec.k) + "," +
             num("%.2f", r.spec.alpha) + "," + mode_label(r.spec) + "," +
             num("%.2f", r.synth_pct) + "," + num("%.2f", r.func_pct) + "\n";
    };
    for (int i = 0; i < m; ++i) emit("top", i + 1, *sorted[i]);
    for (int i = 0; i < m; ++i)
      emit("bottom", static_cast<int>(sorted.size()) - i, *sorted[sorted.size() - 1 - i]);
  }
  return out;
}

std::vector<fs::path> emit_reports(const ReportInputs& in, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir / "heatmaps", ec);
  if (ec) fail(ErrorCode::kIo, "cannot create report directory " + out_dir.string());
  std::vector<fs::path> written;
  const auto put = [&](const fs::path& p, std::string_view text) {
    write_text(p, text);
    written.push_back(p);
  };

  std::vector<HeadRanking> rankings = in.rankings;
  if (rankings.empty() && in.bank) rankings = in.bank->rankings();
  for (const auto& r : rankings) {
    const auto m = heatmap_matrix(r);
    std::string csv = "layer";
    for (int h = 0; h < r.n_heads; ++h) csv += ",h" + std::to_string(h);
    csv += "\n";
    for (int l = 0; l < r.n_layers; ++l) {
      csv += std::to_string(l);
      for (double v : m[l]) csv += "," + num("%.6f", v);
      csv += "\n";
    }
    put(out_dir / "heatmaps" / (ranking_stem(r) + ".csv"), csv);
    if (in.svg) put(out_dir / "heatmaps" / (ranking_stem(r) + ".svg"), heatmap_svg(r, m));
  }

  if (!rankings.empty()) {
    std::string csv = "family,scope,k,first_half_pct,second_half_pct\n";
    for (const auto& s : layer_distribution(rankings, in.layer_split_k))
      csv += std::string(family_name(s.family)) + "," + scope_name(s.scope) + "," +
             std::to_string(in.layer_split_k) + "," + num("%.1f", s.first_half_pct) + "," +
             num("%.1f", s.second_half_pct) + "\n";
    put(out_dir / "layer_distribution.csv", csv);
  }

  if (!in.results.empty()) {
    std::set<int> fam, ks;
    std::set<double> alphas;
    std::set<std::string> modes;
    for (const auto& r : in.results)
      if (r.spec.mode != ExpertMode::kBase) {
        fam.insert(static_cast<int>(r.spec.family));
        ks.insert(r.spec.k);
        alphas.insert(r.spec.alpha);
        modes.insert(mode_label(r.spec));
      }
    const std::size_t full = fam.size() * ks.size() * alphas.size() * modes.size();
    std::string header = "# grid: " + std::to_string(fam.size()) + " families x " +
                         std::to_string(ks.size()) + " K x " + std::to_string(alphas.size()) +
                         " alpha x " + std::to_string(modes.size()) + " mode = " +
                         std::to_string(full) + " cells (full product, none excluded); " +
                         std::to_string(in.results.size()) + " rows including Base\n";
    put(out_dir / "results.csv", header + results_csv(in.results));
    put(out_dir / "alpha_sweep.csv", alpha_sweep_csv(in.results));
    put(out_dir / "leaderboard.csv", leaderboard_csv(in.results, 3));
  }

  if (in.bank) {
    put(out_dir / "norm_histogram.csv", norm_histogram_csv(*in.bank));
    put(out_dir / "projection.csv", projection_csv(*in.bank));
  }
  return written;
}

}  // namespace meltrtl
