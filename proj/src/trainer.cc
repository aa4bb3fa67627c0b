#include "meltrtl/trainer.h"

#include <algorithm>
#include <cmath>

#include "meltrtl/error.h"
#include "meltrtl/rng.h"

namespace meltrtl {

std::vector<TrainingExample> training_examples(const DatasetManifest& corpus) {
  std::vector<TrainingExample> out;
  out.reserve(corpus.samples.size());
  for (const Sample& s : corpus.samples) out.push_back({make_prompt(s.spec), s.code});
  return out;
}

namespace {

using kernels::gemm;
using kernels::gemm_at;
using kernels::gemm_bt;

constexpr double kLnEps = 1e-5;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

void ln_forward(const double* x, const double* g, const double* b, double* xhat, double* rstd,
                double* y, std::size_t T, std::size_t d) {
  for (std::size_t t = 0; t < T; ++t) {
    const double* xt = x + t * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xt[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xt[j] - mean) * (xt[j] - mean);
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + kLnEps);
    rstd[t] = r;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[t * d + j] = (xt[j] - mean) * r;
      y[t * d + j] = xhat[t * d + j] * g[j] + b[j];
    }
  }
}

// Accumulates dx (+=), dg, db from dy.
void ln_backward(const double* dy, const double* xhat, const double* rstd, const double* g,
                 double* dx, double* dg, double* db, std::size_t T, std::size_t d) {
  std::vector<double> dxhat(d);
  for (std::size_t t = 0; t < T; ++t) {
    const double* dyt = dy + t * d;
    const double* xh = xhat + t * d;
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dg[j] += dyt[j] * xh[j];
      db[j] += dyt[j];
      dxhat[j] = dyt[j] * g[j];
      m1 += dxhat[j];
      m2 += dxhat[j] * xh[j];
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) dx[t * d + j] += rstd[t] * (dxhat[j] - m1 - xh[j] * m2);
  }
}

void add_bias(double* y, const double* b, std::size_t T, std::size_t n) {
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < n; ++j) y[t * n + j] += b[j];
}

void col_sum(const double* y, double* out, std::size_t T, std::size_t n) {
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < n; ++j) out[j] += y[t * n + j];
}

struct LayerCache {
  std::vector<double> x, xhat1, rstd1, a1, qkv, probs, z, xmid, xhat2, rstd2, a2, hpre, g;
};

// Forward + backward for one sequence. Returns the summed (unnormalized) loss
// over target positions; gradients are scaled by `grad_scale`.
double sequence_pass(const ModelState& model, const TrainingExample& ex, double grad_scale,
                     double* grad) {
  const ModelConfig& c = model.config();
  const ParamLayout& P = model.layout();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dh = static_cast<std::size_t>(c.d_head());
  const auto H = static_cast<std::size_t>(c.n_heads);
  const auto f = static_cast<std::size_t>(c.d_ff());
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto L = P.layers.size();

  TokenSeq seq = ex.prompt;
  seq.insert(seq.end(), ex.target.begin(), ex.target.end());
  require(!ex.prompt.empty() && !ex.target.empty(), "training example needs prompt and target");
  const std::size_t T = seq.size() - 1;
  if (T > static_cast<std::size_t>(c.max_context))
    fail(ErrorCode::kContract, "training example exceeds the model context");
  const std::size_t first_target = ex.prompt.size() - 1;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto W = [&](std::size_t off) { return model.at(off); };

  std::vector<LayerCache> cache(L);
  std::vector<double> x(T * d);
  for (std::size_t t = 0; t < T; ++t) {
    const double* te = W(P.tok_emb) + static_cast<std::size_t>(token_id(seq[t])) * d;
    const double* pe = W(P.pos_emb) + t * d;
    for (std::size_t j = 0; j < d; ++j) x[t * d + j] = te[j] + pe[j];
  }

  for (std::size_t l = 0; l < L; ++l) {
    const auto& Wl = P.layers[l];
    LayerCache& lc = cache[l];
    lc.x = x;
    lc.xhat1.resize(T * d);
    lc.rstd1.resize(T);
    lc.a1.resize(T * d);
    ln_forward(x.data(), W(Wl.ln1_g), W(Wl.ln1_b), lc.xhat1.data(), lc.rstd1.data(), lc.a1.data(),
               T, d);
    lc.qkv.resize(T * 3 * d);
    gemm(lc.a1.data(), W(Wl.w_qkv), lc.qkv.data(), T, d, 3 * d, false);
    add_bias(lc.qkv.data(), W(Wl.b_qkv), T, 3 * d);
    lc.probs.assign(H * T * T, 0.0);
    lc.z.assign(T * d, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        const double* q = lc.qkv.data() + t * 3 * d + h * dh;
        double* p = lc.probs.data() + (h * T + t) * T;
        double mx = -INFINITY;
        for (std::size_t s = 0; s <= t; ++s) {
          const double* k = lc.qkv.data() + s * 3 * d + d + h * dh;
          double acc = 0.0;
          for (std::size_t i = 0; i < dh; ++i) acc += q[i] * k[i];
          p[s] = acc * scale;
          mx = std::max(mx, p[s]);
        }
        double sum = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          p[s] = std::exp(p[s] - mx);
          sum += p[s];
        }
        double* z = lc.z.data() + t * d + h * dh;
        for (std::size_t s = 0; s <= t; ++s) {
          p[s] /= sum;
          const double* v = lc.qkv.data() + s * 3 * d + 2 * d + h * dh;
          for (std::size_t i = 0; i < dh; ++i) z[i] += p[s] * v[i];
        }
      }
    }
    lc.xmid = x;
    gemm(lc.z.data(), W(Wl.w_o), lc.xmid.data(), T, d, d, true);
    lc.xhat2.resize(T * d);
    lc.rstd2.resize(T);
    lc.a2.resize(T * d);
    ln_forward(lc.xmid.data(), W(Wl.ln2_g), W(Wl.ln2_b), lc.xhat2.data(), lc.rstd2.data(),
               lc.a2.data(), T, d);
    lc.hpre.resize(T * f);
    gemm(lc.a2.data(), W(Wl.w_fc1), lc.hpre.data(), T, d, f, false);
    add_bias(lc.hpre.data(), W(Wl.b_fc1), T, f);
    lc.g.resize(T * f);
    for (std::size_t i = 0; i < T * f; ++i) lc.g[i] = gelu(lc.hpre[i]);
    x = lc.xmid;
    gemm(lc.g.data(), W(Wl.w_fc2), x.data(), T, f, d, true);
    add_bias(x.data(), W(Wl.b_fc2), T, d);
  }

  std::vector<double> xhatf(T * d), rstdf(T), af(T * d), logits(T * V);
  ln_forward(x.data(), W(P.lnf_g), W(P.lnf_b), xhatf.data(), rstdf.data(), af.data(), T, d);
  gemm(af.data(), W(P.w_out), logits.data(), T, d, V, false);
  add_bias(logits.data(), W(P.b_out), T, V);

  double loss = 0.0;
  std::vector<double> dlogits(T * V, 0.0);
  for (std::size_t t = first_target; t < T; ++t) {
    const double* lg = logits.data() + t * V;
    const double mx = *std::max_element(lg, lg + V);
    double sum = 0.0;
    for (std::size_t v = 0; v < V; ++v) sum += std::exp(lg[v] - mx);
    const auto y = static_cast<std::size_t>(token_id(seq[t + 1]));
    loss += -(lg[y] - mx - std::log(sum));
    if (grad) {
      double* dl = dlogits.data() + t * V;
      for (std::size_t v = 0; v < V; ++v) dl[v] = std::exp(lg[v] - mx) / sum * grad_scale;
      dl[y] -= grad_scale;
    }
  }
  if (!grad) return loss;

  auto G = [&](std::size_t off) { return grad + off; };
  gemm_at(af.data(), dlogits.data(), G(P.w_out), T, d, V, true);
  col_sum(dlogits.data(), G(P.b_out), T, V);
  std::vector<double> daf(T * d);
  gemm_bt(dlogits.data(), W(P.w_out), daf.data(), T, V, d, false);
  std::vector<double> dx(T * d, 0.0);
  ln_backward(daf.data(), xhatf.data(), rstdf.data(), W(P.lnf_g), dx.data(), G(P.lnf_g),
              G(P.lnf_b), T, d);

  std::vector<double> dg(T * f), da(T * d), dz(T * d), dqkv(T * 3 * d), dp(T);
  for (std::size_t li = L; li-- > 0;) {
    const auto& Wl = P.layers[li];
    const LayerCache& lc = cache[li];
    // Feed-forward branch: x_next = xmid + fc2(gelu(fc1(ln2(xmid)))).
    gemm_at(lc.g.data(), dx.data(), G(Wl.w_fc2), T, f, d, true);
    col_sum(dx.data(), G(Wl.b_fc2), T, d);
    gemm_bt(dx.data(), W(Wl.w_fc2), dg.data(), T, d, f, false);
    for (std::size_t i = 0; i < T * f; ++i) dg[i] *= gelu_grad(lc.hpre[i]);
    gemm_at(lc.a2.data(), dg.data(), G(Wl.w_fc1), T, d, f, true);
    col_sum(dg.data(), G(Wl.b_fc1), T, f);
    gemm_bt(dg.data(), W(Wl.w_fc1), da.data(), T, f, d, false);
    ln_backward(da.data(), lc.xhat2.data(), lc.rstd2.data(), W(Wl.ln2_g), dx.data(),
                G(Wl.ln2_g), G(Wl.ln2_b), T, d);
    // Attention branch: xmid = x + z Wo.
    gemm_at(lc.z.data(), dx.data(), G(Wl.w_o), T, d, d, true);
    gemm_bt(dx.data(), W(Wl.w_o), dz.data(), T, d, d, false);
    std::fill(dqkv.begin(), dqkv.end(), 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        const double* p = lc.probs.data() + (h * T + t) * T;
        const double* dzt = dz.data() + t * d + h * dh;
        double pdp = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          const double* v = lc.qkv.data() + s * 3 * d + 2 * d + h * dh;
          double* dv = dqkv.data() + s * 3 * d + 2 * d + h * dh;
          double acc = 0.0;
          for (std::size_t i = 0; i < dh; ++i) {
            acc += dzt[i] * v[i];
            dv[i] += p[s] * dzt[i];
          }
          dp[s] = acc;
          pdp += p[s] * acc;
        }
        const double* q = lc.qkv.data() + t * 3 * d + h * dh;
        double* dq = dqkv.data() + t * 3 * d + h * dh;
        for (std::size_t s = 0; s <= t; ++s) {
          const double ds = p[s] * (dp[s] - pdp) * scale;
          const double* k = lc.qkv.data() + s * 3 * d + d + h * dh;
          double* dk = dqkv.data() + s * 3 * d + d + h * dh;
          for (std::size_t i = 0; i < dh; ++i) {
            dq[i] += ds * k[i];
            dk[i] += ds * q[i];
          }
        }
      }
    }
    gemm_at(lc.a1.data(), dqkv.data(), G(Wl.w_qkv), T, d, 3 * d, true);
    col_sum(dqkv.data(), G(Wl.b_qkv), T, 3 * d);
    gemm_bt(dqkv.data(), W(Wl.w_qkv), da.data(), T, 3 * d, d, false);
    ln_backward(da.data(), lc.xhat1.data(), lc.rstd1.data(), W(Wl.ln1_g), dx.data(),
                G(Wl.ln1_g), G(Wl.ln1_b), T, d);
  }
  for (std::size_t t = 0; t < T; ++t) {
    double* gt = G(P.tok_emb) + static_cast<std::size_t>(token_id(seq[t])) * d;
    double* gp = G(P.pos_emb) + t * d;
    for (std::size_t j = 0; j < d; ++j) {
      gt[j] += dx[t * d + j];
      gp[j] += dx[t * d + j];
    }
  }
  return loss;
}

}  // namespace

double loss_and_grad(const ModelState& model, std::span<const TrainingExample* const> batch,
                     std::vector<double>* grad) {
  require(!batch.empty(), "loss_and_grad: empty batch");
  std::size_t n_targets = 0;
  for (const TrainingExample* ex : batch) n_targets += ex->target.size();
  const double inv = 1.0 / static_cast<double>(n_targets);
  if (grad) grad->assign(model.params().size(), 0.0);
  double loss = 0.0;
  for (const TrainingExample* ex : batch)
    loss += sequence_pass(model, *ex, inv, grad ? grad->data() : nullptr);
  return loss * inv;
}

ModelState train(const ModelConfig& config, const std::vector<TrainingExample>& corpus,
                 const TrainOptions& options, TrainReport* report) {
  require(!corpus.empty(), "train: empty corpus");
  require(options.steps >= 0 && options.batch_size > 0, "train: invalid step or batch count");
  ModelState model = ModelState::initialize(config);
  std::vector<double>& w = model.params();
  std::vector<double> m(w.size(), 0.0), v(w.size(), 0.0), grad;
  Rng rng(Rng::mix(options.seed, 0x747261696eULL));
  std::vector<const TrainingExample*> batch(static_cast<std::size_t>(options.batch_size));
  TrainReport local;
  for (int step = 0; step < options.steps; ++step) {
    for (auto& b : batch) b = &corpus[rng.below(corpus.size())];
    const double loss = loss_and_grad(model, batch, &grad);
    if (!std::isfinite(loss))
      fail(ErrorCode::kNumeric, "training diverged at step " + std::to_string(step) +
                                    ": loss is " + std::to_string(loss));
    double lr = options.learning_rate;
    if (options.warmup_steps > 0)
      lr *= std::min(1.0, static_cast<double>(step + 1) / options.warmup_steps);
    if (options.cosine_decay)
      lr *= 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / options.steps));
    const double bc1 = 1.0 - std::pow(options.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(options.beta2, step + 1);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = options.beta1 * m[i] + (1.0 - options.beta1) * grad[i];
      v[i] = options.beta2 * v[i] + (1.0 - options.beta2) * grad[i] * grad[i];
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + options.adam_eps);
    }
    local.losses.push_back(loss);
    if (options.on_step) options.on_step(step, loss);
  }
  if (!local.losses.empty()) {
    local.initial_loss = local.losses.front();
    local.final_loss = local.losses.back();
  }
  if (!all_finite(w)) fail(ErrorCode::kNumeric, "training produced non-finite weights");
  if (report) *report = std::move(local);
  return model;
}

double token_accuracy(const ModelState& model, const std::vector<TrainingExample>& examples) {
  std::size_t hit = 0, total = 0;
  for (const TrainingExample& ex : examples) {
    TokenSeq seq = ex.prompt;
    seq.insert(seq.end(), ex.target.begin(), ex.target.end());
    seq.pop_back();
    const ForwardTrace tr = forward(model, seq);
    for (std::size_t i = 0; i < ex.target.size(); ++i) {
      const auto logits = tr.logits_at(static_cast<int>(ex.prompt.size() - 1 + i));
      const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
      hit += best == token_id(ex.target[i]);
      ++total;
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

}  // namespace meltrtl
