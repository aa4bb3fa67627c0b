#include "meltrtl/probes.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>

#include "meltrtl/error.h"
#include "meltrtl/rng.h"

namespace meltrtl {
namespace {

constexpr std::string_view kBundleMagic{"MELTPRB\1", 8};

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

void require_both_labels(const ProbeData& d, std::string_view who) {
  require(d.x.size() == d.y.size(), std::string(who) + ": feature and label counts differ");
  require(!d.x.empty(), std::string(who) + ": empty training set");
  bool has[2] = {false, false};
  for (auto y : d.y) {
    require(y <= 1, std::string(who) + ": label outside {0,1}");
    has[y] = true;
  }
  if (!has[0] || !has[1])
    fail(ErrorCode::kData, std::string(who) + ": training data holds a single label");
  for (const auto& x : d.x)
    require(x.size() == d.x.front().size(), std::string(who) + ": ragged feature vectors");
}

void fit_standardizer(ProbeModel& m, const ProbeData& d) {
  const std::size_t dim = d.x.front().size();
  const double n = static_cast<double>(d.x.size());
  m.dim = static_cast<int>(dim);
  m.mean.assign(dim, 0.0);
  m.scale.assign(dim, 0.0);
  for (const auto& x : d.x)
    for (std::size_t j = 0; j < dim; ++j) m.mean[j] += x[j];
  for (double& v : m.mean) v /= n;
  for (const auto& x : d.x)
    for (std::size_t j = 0; j < dim; ++j) m.scale[j] += (x[j] - m.mean[j]) * (x[j] - m.mean[j]);
  for (double& v : m.scale) {
    v = std::sqrt(v / n);
    if (!(v > 1e-12)) v = 1.0;
  }
}

Vec standardize(const ProbeModel& m, std::span<const double> h) {
  Vec z(h.size());
  for (std::size_t j = 0; j < h.size(); ++j) z[j] = (h[j] - m.mean[j]) / m.scale[j];
  return z;
}

std::vector<Vec> standardize_all(const ProbeModel& m, const ProbeData& d) {
  std::vector<Vec> out;
  out.reserve(d.x.size());
  for (const auto& x : d.x) out.push_back(standardize(m, x));
  return out;
}

double lr_objective(const std::vector<Vec>& xs, const std::vector<std::uint8_t>& ys, const Vec& w,
                    double b, double l2, Vec* gw, double* gb) {
  const double n = static_cast<double>(xs.size());
  double loss = 0.0;
  if (gw) gw->assign(w.size(), 0.0);
  if (gb) *gb = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double z = dot(w, xs[i]) + b;
    loss += softplus(z) - ys[i] * z;
    if (gw) {
      const double r = (sigmoid(z) - ys[i]) / n;
      for (std::size_t j = 0; j < w.size(); ++j) (*gw)[j] += r * xs[i][j];
      *gb += r;
    }
  }
  double reg = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) {
    reg += w[j] * w[j];
    if (gw) (*gw)[j] += l2 * w[j];
  }
  return loss / n + 0.5 * l2 * reg;
}

double mlp_objective_std(const Vec& p, int hidden, const std::vector<Vec>& xs,
                         const std::vector<std::uint8_t>& ys, double l2, Vec* grad) {
  const std::size_t H = static_cast<std::size_t>(hidden);
  const std::size_t dim = xs.front().size();
  const double* W1 = p.data();
  const double* b1 = W1 + H * dim;
  const double* w2 = b1 + H;
  const double b2 = w2[H];
  double* gW1 = nullptr;
  if (grad) {
    grad->assign(p.size(), 0.0);
    gW1 = grad->data();
  }
  const double n = static_cast<double>(xs.size());
  Vec pre(H), act(H);
  double loss = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double z = b2;
    for (std::size_t k = 0; k < H; ++k) {
      double s = b1[k];
      for (std::size_t j = 0; j < dim; ++j) s += W1[k * dim + j] * xs[i][j];
      pre[k] = s;
      act[k] = s > 0 ? s : 0.0;
      z += w2[k] * act[k];
    }
    loss += softplus(z) - ys[i] * z;
    if (!grad) continue;
    const double dz = (sigmoid(z) - ys[i]) / n;
    double* gb1 = gW1 + H * dim;
    double* gw2 = gb1 + H;
    gw2[H] += dz;
    for (std::size_t k = 0; k < H; ++k) {
      gw2[k] += dz * act[k];
      if (pre[k] <= 0) continue;
      const double dp = dz * w2[k];
      gb1[k] += dp;
      for (std::size_t j = 0; j < dim; ++j) gW1[k * dim + j] += dp * xs[i][j];
    }
  }
  double reg = 0.0;
  for (std::size_t k = 0; k < H * dim; ++k) {
    reg += W1[k] * W1[k];
    if (grad) gW1[k] += l2 * W1[k];
  }
  for (std::size_t k = 0; k < H; ++k) {
    reg += w2[k] * w2[k];
    if (grad) (*grad)[H * dim + H + k] += l2 * w2[k];
  }
  return loss / n + 0.5 * l2 * reg;
}

double rbf(const Vec& a, const Vec& b, double gamma) {
  return std::exp(-gamma * squared_distance(a, b));
}

}  // namespace

std::string_view family_name(ProbeFamily f) {
  switch (f) {
    case ProbeFamily::kLr: return "lr";
    case ProbeFamily::kMlp: return "mlp";
    case ProbeFamily::kSvc: return "svc";
  }
  return "?";
}

ProbeFamily family_from_name(std::string_view name) {
  for (ProbeFamily f : kAllFamilies)
    if (family_name(f) == name) return f;
  fail(ErrorCode::kConfig,
       "unknown probe family '" + std::string(name) + "' (expected lr, mlp or svc)");
}

std::string scope_name(Scope s) {
  if (!s) return "general";
  switch (*s) {
    case Category::kCombinational: return "comb";
    case Category::kSequential: return "seq";
    case Category::kFsm: return "fsm";
  }
  return "?";
}

Scope scope_from_name(std::string_view name) {
  if (name == "general") return std::nullopt;
  for (int c = 0; c < kNumCategories; ++c)
    if (scope_name(static_cast<Category>(c)) == name) return static_cast<Category>(c);
  fail(ErrorCode::kConfig, "unknown scope '" + std::string(name) +
                               "' (expected general, comb, seq or fsm)");
}

ProbeData to_probe_data(const std::vector<ActivationRecord>& records) {
  ProbeData d;
  for (const auto& r : records) {
    d.x.push_back(r.vector);
    d.y.push_back(r.label);
  }
  return d;
}

ProbeModel train_lr(const ProbeData& data, const LrOptions& options) {
  require_both_labels(data, "train_lr");
  ProbeModel m;
  m.family = ProbeFamily::kLr;
  fit_standardizer(m, data);
  const auto xs = standardize_all(m, data);
  m.w.assign(static_cast<std::size_t>(m.dim), 0.0);
  Vec gw, w_new;
  double gb = 0.0;
  double f = lr_objective(xs, data.y, m.w, m.b, options.l2, &gw, &gb);
  double step = 1.0;
  for (m.iterations = 0; m.iterations < options.max_iter; ++m.iterations) {
    const double gnorm2 = dot(gw, gw) + gb * gb;
    if (std::sqrt(gnorm2) < 1e-8) {
      m.converged = true;
      break;
    }
    while (true) {
      w_new = m.w;
      for (std::size_t j = 0; j < w_new.size(); ++j) w_new[j] -= step * gw[j];
      const double b_new = m.b - step * gb;
      const double f_new = lr_objective(xs, data.y, w_new, b_new, options.l2, nullptr, nullptr);
      if (f_new <= f - 0.5 * step * gnorm2 || step < 1e-12) {
        m.w = w_new;
        m.b = b_new;
        break;
      }
      step *= 0.5;
    }
    f = lr_objective(xs, data.y, m.w, m.b, options.l2, &gw, &gb);
    step = std::min(step * 2.0, 1e3);
  }
  if (!m.converged)
    std::cerr << "train_lr: max_iter " << options.max_iter << " reached before convergence\n";
  m.train_accuracy = accuracy(m, data);
  return m;
}

double mlp_objective(const ProbeModel& model, const ProbeData& data, double l2, Vec* grad) {
  require(model.family == ProbeFamily::kMlp, "mlp_objective: not an MLP probe");
  return mlp_objective_std(model.mlp, model.hidden, standardize_all(model, data), data.y, l2, grad);
}

ProbeModel train_mlp(const ProbeData& data, const MlpOptions& options) {
  require_both_labels(data, "train_mlp");
  require(options.hidden > 0, "train_mlp: hidden width must be positive");
  ProbeModel m;
  m.family = ProbeFamily::kMlp;
  m.hidden = options.hidden;
  fit_standardizer(m, data);
  const auto xs = standardize_all(m, data);
  const auto H = static_cast<std::size_t>(options.hidden);
  const auto dim = static_cast<std::size_t>(m.dim);
  m.mlp.assign(H * dim + 2 * H + 1, 0.0);
  Rng rng(Rng::mix(options.seed, 0x6d6c70));
  const double b_in = 1.0 / std::sqrt(static_cast<double>(dim));
  const double b_out = 1.0 / std::sqrt(static_cast<double>(H));
  for (std::size_t k = 0; k < H * dim + H; ++k) m.mlp[k] = (2.0 * rng.uniform() - 1.0) * b_in;
  for (std::size_t k = 0; k < H; ++k) m.mlp[H * dim + H + k] = (2.0 * rng.uniform() - 1.0) * b_out;
  Vec g, mom(m.mlp.size(), 0.0), vel(m.mlp.size(), 0.0);
  const double b1 = 0.9, b2 = 0.999;
  for (m.iterations = 0; m.iterations < options.max_iter; ++m.iterations) {
    const double loss = mlp_objective_std(m.mlp, m.hidden, xs, data.y, options.l2, &g);
    if (!std::isfinite(loss))
      fail(ErrorCode::kNumeric,
           "train_mlp: non-finite loss at iteration " + std::to_string(m.iterations));
    if (l2_norm(g) < 1e-6) {
      m.converged = true;
      break;
    }
    const double c1 = 1.0 - std::pow(b1, m.iterations + 1);
    const double c2 = 1.0 - std::pow(b2, m.iterations + 1);
    for (std::size_t k = 0; k < g.size(); ++k) {
      mom[k] = b1 * mom[k] + (1 - b1) * g[k];
      vel[k] = b2 * vel[k] + (1 - b2) * g[k] * g[k];
      m.mlp[k] -= options.learning_rate * (mom[k] / c1) / (std::sqrt(vel[k] / c2) + 1e-8);
    }
  }
  m.train_accuracy = accuracy(m, data);
  return m;
}

ProbeModel train_svc(const ProbeData& data, const SvcOptions& options) {
  require_both_labels(data, "train_svc");
  require(options.C > 0 && options.tol > 0 && options.gamma >= 0, "train_svc: invalid options");
  ProbeModel m;
  m.family = ProbeFamily::kSvc;
  m.C = options.C;
  fit_standardizer(m, data);
  const auto xs = standardize_all(m, data);
  const std::size_t n = xs.size();
  m.gamma = options.gamma;
  if (m.gamma == 0.0) {
    double s = 0.0, s2 = 0.0;
    for (const auto& x : xs)
      for (double v : x) {
        s += v;
        s2 += v * v;
      }
    const double cnt = static_cast<double>(n) * m.dim;
    const double var = s2 / cnt - (s / cnt) * (s / cnt);
    m.gamma = 1.0 / (m.dim * (var > 1e-12 ? var : 1.0));
  }
  std::vector<double> K(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) K[i * n + j] = K[j * n + i] = rbf(xs[i], xs[j], m.gamma);
  std::vector<double> y(n), a(n, 0.0), G(n, -1.0);
  for (std::size_t i = 0; i < n; ++i) y[i] = data.y[i] ? 1.0 : -1.0;
  const double C = options.C, tau = 1e-12;
  auto upper = [&](std::size_t t) { return a[t] >= C; };
  auto lower = [&](std::size_t t) { return a[t] <= 0; };
  double gap = 0.0;
  for (m.iterations = 0; m.iterations < options.max_iter; ++m.iterations) {
    double gmax = -std::numeric_limits<double>::infinity();
    std::ptrdiff_t ii = -1;
    for (std::size_t t = 0; t < n; ++t) {
      if (y[t] > 0 ? !upper(t) : !lower(t)) {
        const double v = -y[t] * G[t];
        if (v >= gmax) {
          gmax = v;
          ii = static_cast<std::ptrdiff_t>(t);
        }
      }
    }
    double gmax2 = -std::numeric_limits<double>::infinity();
    std::ptrdiff_t jj = -1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < n && ii >= 0; ++t) {
      if (y[t] > 0 ? lower(t) : upper(t)) continue;
      const double v = y[t] * G[t];
      gmax2 = std::max(gmax2, v);
      const double diff = gmax + v;
      if (diff > 0) {
        double quad = 2.0 - 2.0 * K[static_cast<std::size_t>(ii) * n + t];
        if (quad <= 0) quad = tau;
        const double obj = -diff * diff / quad;
        if (obj <= best) {
          best = obj;
          jj = static_cast<std::ptrdiff_t>(t);
        }
      }
    }
    gap = gmax + gmax2;
    if (ii < 0 || jj < 0 || gap < options.tol) {
      m.converged = true;
      break;
    }
    const auto i = static_cast<std::size_t>(ii), j = static_cast<std::size_t>(jj);
    const double ai = a[i], aj = a[j];
    const double Qij = y[i] * y[j] * K[i * n + j];
    if (y[i] != y[j]) {
      double quad = 2.0 + 2.0 * Qij;
      if (quad <= 0) quad = tau;
      const double delta = (-G[i] - G[j]) / quad;
      const double diff = a[i] - a[j];
      a[i] += delta;
      a[j] += delta;
      if (diff > 0) {
        if (a[j] < 0) {
          a[j] = 0;
          a[i] = diff;
        }
      } else if (a[i] < 0) {
        a[i] = 0;
        a[j] = -diff;
      }
      if (diff > 0) {
        if (a[i] > C) {
          a[i] = C;
          a[j] = C - diff;
        }
      } else if (a[j] > C) {
        a[j] = C;
        a[i] = C + diff;
      }
    } else {
      double quad = 2.0 - 2.0 * Qij;
      if (quad <= 0) quad = tau;
      const double delta = (G[i] - G[j]) / quad;
      const double sum = a[i] + a[j];
      a[i] -= delta;
      a[j] += delta;
      if (sum > C) {
        if (a[i] > C) {
          a[i] = C;
          a[j] = sum - C;
        }
      } else if (a[j] < 0) {
        a[j] = 0;
        a[i] = sum;
      }
      if (sum > C) {
        if (a[j] > C) {
          a[j] = C;
          a[i] = sum - C;
        }
      } else if (a[i] < 0) {
        a[i] = 0;
        a[j] = sum;
      }
    }
    const double di = a[i] - ai, dj = a[j] - aj;
    for (std::size_t t = 0; t < n; ++t)
      G[t] += y[t] * (y[i] * K[i * n + t] * di + y[j] * K[j * n + t] * dj);
  }
  m.kkt_gap = gap;
  if (!m.converged)
    std::cerr << "train_svc: iteration cap reached with KKT gap " << gap << "\n";
  double ub = std::numeric_limits<double>::infinity(), lb = -ub, sum_free = 0.0;
  int n_free = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double yg = y[t] * G[t];
    if (upper(t)) {
      if (y[t] < 0) ub = std::min(ub, yg); else lb = std::max(lb, yg);
    } else if (lower(t)) {
      if (y[t] > 0) ub = std::min(ub, yg); else lb = std::max(lb, yg);
    } else {
      ++n_free;
      sum_free += yg;
    }
  }
  const double rho = n_free > 0 ? sum_free / n_free : (ub + lb) / 2.0;
  m.bias = -rho;
  for (std::size_t t = 0; t < n; ++t)
    if (a[t] > 0) {
      m.support.push_back(xs[t]);
      m.alpha.push_back(a[t]);
      m.sv_label.push_back(y[t] > 0 ? 1 : -1);
    }
  m.train_accuracy = accuracy(m, data);
  return m;
}

ProbeModel train_probe(ProbeFamily family, const ProbeData& data, const ProbeOptions& options) {
  switch (family) {
    case ProbeFamily::kLr: return train_lr(data, options.lr);
    case ProbeFamily::kMlp: return train_mlp(data, options.mlp);
    case ProbeFamily::kSvc: return train_svc(data, options.svc);
  }
  fail(ErrorCode::kContract, "train_probe: unknown family");
}

Prediction predict(const ProbeModel& p, std::span<const double> h) {
  require(static_cast<int>(h.size()) == p.dim,
          "predict: vector length " + std::to_string(h.size()) + " but probe expects " +
              std::to_string(p.dim));
  const Vec x = standardize(p, h);
  Prediction out;
  switch (p.family) {
    case ProbeFamily::kLr:
      out.score = sigmoid(dot(p.w, x) + p.b);
      out.cls = out.score >= 0.5;
      break;
    case ProbeFamily::kMlp: {
      const auto H = static_cast<std::size_t>(p.hidden);
      const auto dim = x.size();
      const double* w2 = p.mlp.data() + H * dim + H;
      double z = w2[H];
      for (std::size_t k = 0; k < H; ++k) {
        double s = p.mlp[H * dim + k];
        for (std::size_t j = 0; j < dim; ++j) s += p.mlp[k * dim + j] * x[j];
        if (s > 0) z += w2[k] * s;
      }
      out.score = sigmoid(z);
      out.cls = out.score >= 0.5;
      break;
    }
    case ProbeFamily::kSvc: {
      double f = p.bias;
      for (std::size_t j = 0; j < p.support.size(); ++j)
        f += p.alpha[j] * p.sv_label[j] * rbf(p.support[j], x, p.gamma);
      out.score = f;
      out.cls = f >= 0.0;
      break;
    }
  }
  return out;
}

double accuracy(const ProbeModel& probe, const ProbeData& data) {
  if (data.x.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < data.x.size(); ++i) hit += predict(probe, data.x[i]).cls == data.y[i];
  return static_cast<double>(hit) / static_cast<double>(data.x.size());
}

std::uint8_t ensemble_vote(const ProbeModel& lr, const ProbeModel& mlp, const ProbeModel& svc,
                           std::span<const double> h) {
  const int votes = predict(lr, h).cls + predict(mlp, h).cls + predict(svc, h).cls;
  return votes >= 2;
}

namespace {

void sort_ranking(HeadRanking& ranking) {
  std::sort(ranking.entries.begin(), ranking.entries.end(),
            [](const HeadScore& a, const HeadScore& b) {
              if (a.val_accuracy != b.val_accuracy) return a.val_accuracy > b.val_accuracy;
              if (a.layer != b.layer) return a.layer < b.layer;
              return a.head < b.head;
            });
}

}  // namespace

HeadRanking rank_heads(const ActivationStore& store, ProbeFamily family, Scope scope,
                       const RankOptions& options, std::vector<ProbeModel>* probes) {
  const auto [train, val] = split(filter_category(store, scope), options.train_fraction,
                                  options.split_seed);
  HeadRanking ranking;
  ranking.family = family;
  ranking.scope = scope;
  ranking.n_layers = store.n_layers();
  ranking.n_heads = store.n_heads();
  if (probes) probes->assign(static_cast<std::size_t>(store.n_layers() * store.n_heads()), {});
  for (int l = 0; l < store.n_layers(); ++l)
    for (int h = 0; h < store.n_heads(); ++h) {
      const ProbeData dtr = to_probe_data(train.group(l, h));
      const ProbeData dva = to_probe_data(val.group(l, h));
      HeadScore s{l, h, 0.5, 0.5, true};
      const bool two_labels = std::count(dtr.y.begin(), dtr.y.end(), 1) > 0 &&
                              std::count(dtr.y.begin(), dtr.y.end(), 0) > 0;
      bool varying = false;
      for (std::size_t i = 1; i < dtr.x.size() && !varying; ++i) varying = dtr.x[i] != dtr.x[0];
      ProbeModel p;
      p.family = family;
      if (two_labels && varying && !dva.x.empty()) {
        p = train_probe(family, dtr, options.probe);
        p.val_accuracy = accuracy(p, dva);
        s = {l, h, p.val_accuracy, p.train_accuracy, false};
      } else {
        std::cerr << "rank_heads: head (" << l << ", " << h << ") in scope " << scope_name(scope)
                  << " is degenerate or single-label; scored 0.5\n";
        p.val_accuracy = p.train_accuracy = 0.5;
      }
      if (probes) (*probes)[static_cast<std::size_t>(l * store.n_heads() + h)] = std::move(p);
      ranking.entries.push_back(s);
    }
  sort_ranking(ranking);
  return ranking;
}

HeadRanking ranking_from_probes(const std::vector<ProbeModel>& probes, ProbeFamily family,
                                Scope scope, int n_layers, int n_heads) {
  require(n_layers > 0 && n_heads > 0 &&
              probes.size() == static_cast<std::size_t>(n_layers) * n_heads,
          "ranking_from_probes: probe count differs from layers x heads");
  HeadRanking ranking;
  ranking.family = family;
  ranking.scope = scope;
  ranking.n_layers = n_layers;
  ranking.n_heads = n_heads;
  for (int l = 0; l < n_layers; ++l)
    for (int h = 0; h < n_heads; ++h) {
      const ProbeModel& p = probes[static_cast<std::size_t>(l) * n_heads + h];
      if (p.dim > 0 && p.family != family)
        fail(ErrorCode::kFormat, "ranking_from_probes: probe family mismatch");
      ranking.entries.push_back({l, h, p.val_accuracy, p.train_accuracy, p.dim == 0});
    }
  sort_ranking(ranking);
  return ranking;
}

std::vector<HeadId> select_top_k(const HeadRanking& ranking, int k) {
  if (k < 1 || k > static_cast<int>(ranking.entries.size()))
    fail(ErrorCode::kContract, "select_top_k: k=" + std::to_string(k) + " outside [1, " +
                                   std::to_string(ranking.entries.size()) + "]");
  std::vector<HeadId> out;
  for (int i = 0; i < k; ++i) out.push_back({ranking.entries[i].layer, ranking.entries[i].head});
  return out;
}

std::string ranking_csv(const HeadRanking& ranking) {
  std::string out = "layer,head,family,scope,val_accuracy,rank\n";
  char buf[160];
  for (std::size_t i = 0; i < ranking.entries.size(); ++i) {
    const auto& e = ranking.entries[i];
    std::snprintf(buf, sizeof buf, "%d,%d,%s,%s,%.6f,%zu\n", e.layer, e.head,
                  std::string(family_name(ranking.family)).c_str(),
                  scope_name(ranking.scope).c_str(), e.val_accuracy, i + 1);
    out += buf;
  }
  return out;
}

void encode_probe(BinaryWriter& w, const ProbeModel& p) {
  auto vec = [&](const Vec& v) {
    w.u64(v.size());
    w.f64s(v);
  };
  w.u8(static_cast<std::uint8_t>(p.family));
  w.u32(static_cast<std::uint32_t>(p.dim));
  vec(p.mean);
  vec(p.scale);
  vec(p.w);
  w.f64(p.b);
  w.u32(static_cast<std::uint32_t>(p.hidden));
  vec(p.mlp);
  w.u64(p.support.size());
  for (std::size_t j = 0; j < p.support.size(); ++j) {
    w.f64s(p.support[j]);
    w.f64(p.alpha[j]);
    w.u8(static_cast<std::uint8_t>(p.sv_label[j]));
  }
  w.f64(p.bias);
  w.f64(p.gamma);
  w.f64(p.C);
  w.f64(p.kkt_gap);
  w.f64(p.train_accuracy);
  w.f64(p.val_accuracy);
  w.u32(static_cast<std::uint32_t>(p.iterations));
  w.u8(p.converged);
}

ProbeModel decode_probe(BinaryReader& r) {
  auto vec = [&](std::size_t limit) {
    const std::uint64_t n = r.u64();
    if (n > limit || n > r.remaining() / 8) fail(ErrorCode::kFormat, "probe: block length invalid");
    Vec v(n);
    r.f64s(v);
    return v;
  };
  ProbeModel p;
  const std::uint8_t fam = r.u8();
  if (fam > 2) fail(ErrorCode::kFormat, "probe: unknown family tag " + std::to_string(fam));
  p.family = static_cast<ProbeFamily>(fam);
  p.dim = static_cast<int>(r.u32());
  const auto dim = static_cast<std::size_t>(p.dim);
  p.mean = vec(dim);
  p.scale = vec(dim);
  if (p.mean.size() != p.scale.size())
    fail(ErrorCode::kFormat, "probe: normalization blocks differ in length");
  p.w = vec(dim);
  p.b = r.f64();
  p.hidden = static_cast<int>(r.u32());
  p.mlp = vec(std::numeric_limits<std::uint32_t>::max());
  if (!p.mlp.empty() &&
      p.mlp.size() != static_cast<std::size_t>(p.hidden) * (dim + 2) + 1)
    fail(ErrorCode::kFormat, "probe: MLP block size does not match hidden width");
  const std::uint64_t nsv = r.u64();
  if (nsv > r.remaining() / (8 * (dim + 1) + 1))
    fail(ErrorCode::kFormat, "probe: support vector count exceeds payload");
  for (std::uint64_t j = 0; j < nsv; ++j) {
    Vec s(dim);
    r.f64s(s);
    p.support.push_back(std::move(s));
    p.alpha.push_back(r.f64());
    p.sv_label.push_back(static_cast<std::int8_t>(r.u8()));
  }
  p.bias = r.f64();
  p.gamma = r.f64();
  p.C = r.f64();
  p.kkt_gap = r.f64();
  p.train_accuracy = r.f64();
  p.val_accuracy = r.f64();
  p.iterations = static_cast<int>(r.u32());
  p.converged = r.u8() != 0;
  return p;
}

void save_probe_bundle(const std::vector<ProbeBundleEntry>& entries,
                       const std::filesystem::path& path) {
  BinaryWriter w(kBundleMagic, kProbeFormatVersion);
  w.u64(entries.size());
  for (const auto& e : entries) {
    w.u16(static_cast<std::uint16_t>(e.head.layer));
    w.u16(static_cast<std::uint16_t>(e.head.head));
    encode_probe(w, e.probe);
  }
  std::move(w).write_file(path);
}

std::vector<ProbeBundleEntry> load_probe_bundle(const std::filesystem::path& path) {
  BinaryReader r = BinaryReader::from_file(path, kBundleMagic, kProbeFormatVersion, "probe bundle");
  const std::uint64_t n = r.u64();
  std::vector<ProbeBundleEntry> out;
  for (std::uint64_t i = 0; i < n; ++i) {
    ProbeBundleEntry e;
    e.head.layer = r.u16();
    e.head.head = r.u16();
    e.probe = decode_probe(r);
    out.push_back(std::move(e));
  }
  r.expect_end();
  return out;
}

}  // namespace meltrtl
