#include "meltrtl/model.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "meltrtl/binio.h"
#include "meltrtl/error.h"
#include "meltrtl/rng.h"

namespace meltrtl {

void ModelConfig::validate() const {
  if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || vocab_size <= 0 || max_context <= 0)
    fail(ErrorCode::kConfig, "model config: all dimensions must be positive");
  if (d_model % n_heads != 0)
    fail(ErrorCode::kConfig, "model config: d_model must be divisible by n_heads");
  if (vocab_size < kVocabSize)
    fail(ErrorCode::kConfig, "model config: vocab_size smaller than the symbol table");
}

ParamLayout::ParamLayout(const ModelConfig& c) {
  c.validate();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto f = static_cast<std::size_t>(c.d_ff());
  const auto v = static_cast<std::size_t>(c.vocab_size);
  std::size_t off = 0;
  auto take = [&](std::size_t n) {
    const std::size_t o = off;
    off += n;
    return o;
  };
  tok_emb = take(v * d);
  pos_emb = take(static_cast<std::size_t>(c.max_context) * d);
  for (int l = 0; l < c.n_layers; ++l) {
    Layer L;
    L.ln1_g = take(d);
    L.ln1_b = take(d);
    L.w_qkv = take(d * 3 * d);
    L.b_qkv = take(3 * d);
    L.w_o = take(d * d);
    L.ln2_g = take(d);
    L.ln2_b = take(d);
    L.w_fc1 = take(d * f);
    L.b_fc1 = take(f);
    L.w_fc2 = take(f * d);
    L.b_fc2 = take(d);
    layers.push_back(L);
  }
  lnf_g = take(d);
  lnf_b = take(d);
  w_out = take(d * v);
  b_out = take(v);
  total = off;
}

std::vector<ParamLayout::Block> ParamLayout::blocks() const {
  std::vector<Block> out;
  auto add = [&](std::string name, std::size_t begin, std::size_t end) {
    out.push_back({std::move(name), begin, end - begin});
  };
  add("tok_emb", tok_emb, pos_emb);
  add("pos_emb", pos_emb, layers.empty() ? lnf_g : layers[0].ln1_g);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Layer& L = layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "ln1_g", L.ln1_g, L.ln1_b);
    add(p + "ln1_b", L.ln1_b, L.w_qkv);
    add(p + "w_qkv", L.w_qkv, L.b_qkv);
    add(p + "b_qkv", L.b_qkv, L.w_o);
    add(p + "w_o", L.w_o, L.ln2_g);
    add(p + "ln2_g", L.ln2_g, L.ln2_b);
    add(p + "ln2_b", L.ln2_b, L.w_fc1);
    add(p + "w_fc1", L.w_fc1, L.b_fc1);
    add(p + "b_fc1", L.b_fc1, L.w_fc2);
    add(p + "w_fc2", L.w_fc2, L.b_fc2);
    add(p + "b_fc2", L.b_fc2, l + 1 < layers.size() ? layers[l + 1].ln1_g : lnf_g);
  }
  add("lnf_g", lnf_g, lnf_b);
  add("lnf_b", lnf_b, w_out);
  add("w_out", w_out, b_out);
  add("b_out", b_out, total);
  return out;
}

ModelState::ModelState(const ModelConfig& config)
    : config_(config), layout_(config), params_(layout_.total, 0.0) {}

ModelState ModelState::initialize(const ModelConfig& config) {
  ModelState m(config);
  Rng rng(Rng::mix(config.seed, 0x696e6974ULL));
  auto& p = m.params_;
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto f = static_cast<std::size_t>(config.d_ff());
  const auto v = static_cast<std::size_t>(config.vocab_size);
  auto normal = [&](std::size_t off, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) p[off + i] = rng.normal();
  };
  auto uniform = [&](std::size_t off, std::size_t n, std::size_t fan_in) {
    const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < n; ++i) p[off + i] = (2.0 * rng.uniform() - 1.0) * b;
  };
  auto ones = [&](std::size_t off, std::size_t n) { std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(off), n, 1.0); };
  const ParamLayout& L = m.layout_;
  normal(L.tok_emb, v * d);
  normal(L.pos_emb, static_cast<std::size_t>(config.max_context) * d);
  for (const auto& l : L.layers) {
    ones(l.ln1_g, d);
    uniform(l.w_qkv, d * 3 * d, d);
    uniform(l.b_qkv, 3 * d, d);
    uniform(l.w_o, d * d, d);
    ones(l.ln2_g, d);
    uniform(l.w_fc1, d * f, d);
    uniform(l.b_fc1, f, d);
    uniform(l.w_fc2, f * d, f);
    uniform(l.b_fc2, d, f);
  }
  ones(L.lnf_g, d);
  uniform(L.w_out, d * v, d);
  uniform(L.b_out, v, d);
  return m;
}

Mat ModelState::output_projection(int layer, int head) const {
  require(layer >= 0 && layer < config_.n_layers && head >= 0 && head < config_.n_heads,
          "output_projection: head out of range");
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto dh = static_cast<std::size_t>(config_.d_head());
  const double* wo = at(layout_.layers[static_cast<std::size_t>(layer)].w_o);
  Mat q(d, dh);
  for (std::size_t i = 0; i < dh; ++i) {
    const double* row = wo + (static_cast<std::size_t>(head) * dh + i) * d;
    for (std::size_t j = 0; j < d; ++j) q(j, i) = row[j];
  }
  return q;
}

std::string ModelState::fingerprint() const {
  std::string bytes;
  for (int v : {config_.n_layers, config_.n_heads, config_.d_model, config_.vocab_size,
                config_.max_context})
    bytes.append(reinterpret_cast<const char*>(&v), sizeof v);
  bytes.append(reinterpret_cast<const char*>(params_.data()), params_.size() * sizeof(double));
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", crc32_of(bytes));
  return buf;
}

void SteeringPlan::validate(const ModelConfig& config) const {
  require(alpha >= 0.0 && std::isfinite(alpha), "steering plan: alpha must be finite and >= 0");
  std::vector<char> seen(static_cast<std::size_t>(config.n_layers * config.n_heads), 0);
  for (const PlanEntry& e : entries) {
    require(e.layer >= 0 && e.layer < config.n_layers,
            "steering plan: layer " + std::to_string(e.layer) + " out of range");
    require(e.head >= 0 && e.head < config.n_heads,
            "steering plan: head " + std::to_string(e.head) + " out of range");
    char& s = seen[static_cast<std::size_t>(e.layer * config.n_heads + e.head)];
    require(!s, "steering plan: duplicate head (" + std::to_string(e.layer) + ", " +
                    std::to_string(e.head) + ")");
    s = 1;
    require(e.theta.size() == static_cast<std::size_t>(config.d_model),
            "steering plan: theta length differs from d_model");
    require(std::abs(l2_norm(e.theta) - 1.0) <= 1e-9, "steering plan: theta is not unit norm");
    require(e.sigma <= 1, "steering plan: sigma must be 0 or 1");
  }
}

std::vector<int> SteeringPlan::layers() const {
  std::vector<int> out;
  for (const PlanEntry& e : entries) out.push_back(e.layer);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

namespace {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

// out = bias + x * W, W row-major [n_in x n_out].
void affine(const double* x, const double* w, const double* bias, double* out, std::size_t n_in,
            std::size_t n_out) {
  if (bias)
    std::copy_n(bias, n_out, out);
  else
    std::fill_n(out, n_out, 0.0);
  for (std::size_t i = 0; i < n_in; ++i) {
    const double xi = x[i];
    const double* wi = w + i * n_out;
    for (std::size_t j = 0; j < n_out; ++j) out[j] += xi * wi[j];
  }
}

void layer_norm_into(const double* x, const double* g, const double* b, double* out,
                     std::size_t n) {
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += x[i];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= static_cast<double>(n);
  const double rstd = 1.0 / std::sqrt(var + 1e-5);
  for (std::size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) * rstd * g[i] + b[i];
}

}  // namespace

std::span<const double> ForwardTrace::logits_at(int pos) const {
  return {logits.data() + static_cast<std::size_t>(pos * vocab), static_cast<std::size_t>(vocab)};
}
std::span<const double> ForwardTrace::tap(int pos, int layer, int head) const {
  const std::size_t o =
      static_cast<std::size_t>(((pos * n_layers + layer) * n_heads + head) * d_head);
  return {taps.data() + o, static_cast<std::size_t>(d_head)};
}
std::span<const double> ForwardTrace::layer_taps(int pos, int layer) const {
  const std::size_t o = static_cast<std::size_t>((pos * n_layers + layer) * d_model);
  return {taps.data() + o, static_cast<std::size_t>(d_model)};
}
std::span<const double> ForwardTrace::residual_in(int pos, int layer) const {
  const std::size_t o = static_cast<std::size_t>((pos * (n_layers + 1) + layer) * d_model);
  return {resid_in.data() + o, static_cast<std::size_t>(d_model)};
}
std::span<const double> ForwardTrace::residual_attn(int pos, int layer) const {
  const std::size_t o = static_cast<std::size_t>((pos * n_layers + layer) * d_model);
  return {resid_attn.data() + o, static_cast<std::size_t>(d_model)};
}
std::span<const double> ForwardTrace::injected_at(int pos, int layer) const {
  const std::size_t o = static_cast<std::size_t>((pos * n_layers + layer) * d_model);
  return {injected.data() + o, static_cast<std::size_t>(d_model)};
}

DecodeSession::DecodeSession(const ModelState& model, const SteeringPlan* plan, DynamicGate gate)
    : model_(model), plan_(plan), gate_(std::move(gate)) {
  const ModelConfig& c = model.config();
  const auto L = static_cast<std::size_t>(c.n_layers);
  const auto d = static_cast<std::size_t>(c.d_model);
  entries_by_layer_.resize(L);
  static_delta_.resize(L);
  if (plan_) {
    plan_->validate(c);
    require(plan_->mode == SteeringMode::kStatic || static_cast<bool>(gate_),
            "dynamic steering plan needs a gate");
    for (const PlanEntry& e : plan_->entries)
      entries_by_layer_[static_cast<std::size_t>(e.layer)].push_back(&e);
    if (plan_->mode == SteeringMode::kStatic) {
      for (std::size_t l = 0; l < L; ++l) {
        if (entries_by_layer_[l].empty()) continue;
        Vec sum(d, 0.0);
        for (const PlanEntry* e : entries_by_layer_[l])
          if (e->sigma)
            for (std::size_t j = 0; j < d; ++j) sum[j] += e->theta[j];
        for (double& s : sum) s *= plan_->alpha;
        static_delta_[l] = std::move(sum);
      }
    }
  }
  k_cache_.assign(L, std::vector<double>(static_cast<std::size_t>(c.max_context) * d));
  v_cache_.assign(L, std::vector<double>(static_cast<std::size_t>(c.max_context) * d));
  x_.resize(d);
  a_.resize(d);
  qkv_.resize(3 * d);
  z_.resize(d);
  attn_.resize(d);
  h_.resize(static_cast<std::size_t>(c.d_ff()));
  ff_.resize(d);
  scores_.resize(static_cast<std::size_t>(c.max_context));
  logits_.resize(static_cast<std::size_t>(c.vocab_size));
  delta_.resize(d);
}

void DecodeSession::record_into(ForwardTrace* trace) {
  const ModelConfig& c = model_.config();
  trace->n_layers = c.n_layers;
  trace->n_heads = c.n_heads;
  trace->d_model = c.d_model;
  trace->d_head = c.d_head();
  trace->vocab = c.vocab_size;
  trace_ = trace;
}

std::span<const double> DecodeSession::push(Token token, bool steer) {
  const ModelConfig& c = model_.config();
  const ParamLayout& P = model_.layout();
  if (length_ >= c.max_context)
    fail(ErrorCode::kContract, "context overflow: more than " + std::to_string(c.max_context) +
                                   " positions");
  require(token_id(token) < c.vocab_size, "token id outside the model vocabulary");
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dh = static_cast<std::size_t>(c.d_head());
  const auto H = static_cast<std::size_t>(c.n_heads);
  const auto f = static_cast<std::size_t>(c.d_ff());
  const auto pos = static_cast<std::size_t>(length_);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  if (trace_) {
    trace_->n_pos = length_ + 1;
    trace_->taps.resize(trace_->taps.size() + static_cast<std::size_t>(c.n_layers) * d);
    trace_->resid_in.resize(trace_->resid_in.size() + static_cast<std::size_t>(c.n_layers + 1) * d);
    trace_->resid_attn.resize(trace_->resid_attn.size() + static_cast<std::size_t>(c.n_layers) * d);
    trace_->injected.resize(trace_->injected.size() + static_cast<std::size_t>(c.n_layers) * d, 0.0);
  }
  auto record = [&](std::vector<double>& buf, std::size_t per_pos, std::size_t slot,
                    const double* src) {
    std::copy_n(src, d, buf.data() + pos * per_pos + slot * d);
  };

  const double* te = model_.at(P.tok_emb) + static_cast<std::size_t>(token_id(token)) * d;
  const double* pe = model_.at(P.pos_emb) + pos * d;
  for (std::size_t j = 0; j < d; ++j) x_[j] = te[j] + pe[j];

  for (std::size_t l = 0; l < P.layers.size(); ++l) {
    const auto& W = P.layers[l];
    if (trace_) record(trace_->resid_in, (P.layers.size() + 1) * d, l, x_.data());
    layer_norm_into(x_.data(), model_.at(W.ln1_g), model_.at(W.ln1_b), a_.data(), d);
    affine(a_.data(), model_.at(W.w_qkv), model_.at(W.b_qkv), qkv_.data(), d, 3 * d);
    double* kc = k_cache_[l].data();
    double* vc = v_cache_[l].data();
    std::copy_n(qkv_.data() + d, d, kc + pos * d);
    std::copy_n(qkv_.data() + 2 * d, d, vc + pos * d);
    for (std::size_t h = 0; h < H; ++h) {
      const double* q = qkv_.data() + h * dh;
      double mx = -INFINITY;
      for (std::size_t s = 0; s <= pos; ++s) {
        const double* k = kc + s * d + h * dh;
        double acc = 0.0;
        for (std::size_t i = 0; i < dh; ++i) acc += q[i] * k[i];
        scores_[s] = acc * scale;
        mx = std::max(mx, scores_[s]);
      }
      double sum = 0.0;
      for (std::size_t s = 0; s <= pos; ++s) {
        scores_[s] = std::exp(scores_[s] - mx);
        sum += scores_[s];
      }
      double* z = z_.data() + h * dh;
      std::fill_n(z, dh, 0.0);
      for (std::size_t s = 0; s <= pos; ++s) {
        const double p = scores_[s] / sum;
        const double* v = vc + s * d + h * dh;
        for (std::size_t i = 0; i < dh; ++i) z[i] += p * v[i];
      }
    }
    if (trace_) record(trace_->taps, P.layers.size() * d, l, z_.data());
    affine(z_.data(), model_.at(W.w_o), nullptr, attn_.data(), d, d);
    for (std::size_t j = 0; j < d; ++j) x_[j] += attn_[j];

    if (steer && !entries_by_layer_[l].empty()) {
      const Vec* delta = nullptr;
      if (plan_->mode == SteeringMode::kStatic) {
        delta = &static_delta_[l];
      } else {
        std::fill(delta_.begin(), delta_.end(), 0.0);
        bool any = false;
        for (const PlanEntry* e : entries_by_layer_[l]) {
          const std::span<const double> zh(z_.data() + static_cast<std::size_t>(e->head) * dh, dh);
          if (!gate_(*e, zh)) continue;
          any = true;
          for (std::size_t j = 0; j < d; ++j) delta_[j] += e->theta[j];
        }
        if (any) {
          for (double& v : delta_) v *= plan_->alpha;
          delta = &delta_;
        }
      }
      if (delta) {
        for (std::size_t j = 0; j < d; ++j) x_[j] += (*delta)[j];
        extra_adds_ += d;
        if (trace_) record(trace_->injected, P.layers.size() * d, l, delta->data());
      }
    }
    if (trace_) record(trace_->resid_attn, P.layers.size() * d, l, x_.data());

    layer_norm_into(x_.data(), model_.at(W.ln2_g), model_.at(W.ln2_b), a_.data(), d);
    affine(a_.data(), model_.at(W.w_fc1), model_.at(W.b_fc1), h_.data(), d, f);
    for (double& v : h_) v = gelu(v);
    affine(h_.data(), model_.at(W.w_fc2), model_.at(W.b_fc2), ff_.data(), f, d);
    for (std::size_t j = 0; j < d; ++j) x_[j] += ff_[j];
  }
  if (trace_) record(trace_->resid_in, (P.layers.size() + 1) * d, P.layers.size(), x_.data());
  layer_norm_into(x_.data(), model_.at(P.lnf_g), model_.at(P.lnf_b), a_.data(), d);
  affine(a_.data(), model_.at(P.w_out), model_.at(P.b_out), logits_.data(), d,
         static_cast<std::size_t>(c.vocab_size));
  if (trace_) trace_->logits.insert(trace_->logits.end(), logits_.begin(), logits_.end());
  ++length_;
  return logits_;
}

namespace {

ForwardTrace run_forward(const ModelState& model, const TokenSeq& tokens, const SteeringPlan* plan,
                         int steer_from, const DynamicGate& gate) {
  if (static_cast<int>(tokens.size()) > model.config().max_context)
    fail(ErrorCode::kContract, "context overflow: " + std::to_string(tokens.size()) +
                                   " tokens exceed max_context " +
                                   std::to_string(model.config().max_context));
  DecodeSession session(model, plan, gate);
  ForwardTrace trace;
  session.record_into(&trace);
  for (std::size_t t = 0; t < tokens.size(); ++t)
    session.push(tokens[t], plan && static_cast<int>(t) >= steer_from);
  return trace;
}

}  // namespace

ForwardTrace forward(const ModelState& model, const TokenSeq& tokens) {
  return run_forward(model, tokens, nullptr, 0, {});
}

ForwardTrace forward_steered(const ModelState& model, const TokenSeq& tokens,
                             const SteeringPlan& plan, int steer_from, const DynamicGate& gate) {
  if (steer_from < 0) steer_from = static_cast<int>(tokens.size()) - 1;
  return run_forward(model, tokens, &plan, steer_from, gate);
}

TokenSeq make_prompt(const TokenSeq& spec) {
  TokenSeq p = spec;
  p.push_back(Token::kSep);
  return p;
}

Generation generate(const ModelState& model, const TokenSeq& prompt, const SteeringPlan* plan,
                    const DecodeOptions& options, const DynamicGate& gate) {
  using Clock = std::chrono::steady_clock;
  const ModelConfig& c = model.config();
  require(!prompt.empty(), "generate: empty prompt");
  if (static_cast<int>(prompt.size()) > c.max_context)
    fail(ErrorCode::kContract, "generate: prompt exceeds the model context");
  require(options.temperature >= 0.0, "generate: temperature must be >= 0");
  const auto t_start = Clock::now();
  DecodeSession session(model, plan, gate);
  Rng rng(options.seed);
  const bool steer_prompt = options.scope == SteerScope::kAll;
  Generation g;
  for (std::size_t t = 0; t + 1 < prompt.size(); ++t) session.push(prompt[t], plan && steer_prompt);
  Token next = prompt.back();
  for (int i = 0; i < options.max_new; ++i) {
    if (session.length() >= c.max_context) {
      g.truncated = true;
      break;
    }
    const auto t0 = Clock::now();
    const std::span<const double> logits = session.push(next, plan != nullptr);
    const std::size_t n = std::min<std::size_t>(logits.size(), kVocabSize);
    std::size_t best = 0;
    if (options.temperature == 0.0) {
      for (std::size_t v = 1; v < n; ++v)
        if (logits[v] > logits[best]) best = v;
    } else {
      double mx = logits[0];
      for (std::size_t v = 1; v < n; ++v) mx = std::max(mx, logits[v]);
      std::vector<double> w(n);
      for (std::size_t v = 0; v < n; ++v) w[v] = std::exp((logits[v] - mx) / options.temperature);
      best = rng.weighted(w);
    }
    next = static_cast<Token>(best);
    g.tokens.push_back(next);
    g.token_seconds.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
    if (next == Token::kEnd) {
      g.hit_end = true;
      break;
    }
  }
  g.extra_adds = session.extra_adds();
  g.total_seconds = std::chrono::duration<double>(Clock::now() - t_start).count();
  return g;
}

}  // namespace meltrtl
