#pragma once

// Pre-layernorm decoder-only transformer with per-head activation taps and an
// additive steering hook between attention aggregation and the feed-forward
// block:
//
//   x~ = x + sum_h Q_h z_h          (no output-projection bias)
//   x~ += alpha * sum_h sigma_h theta_h   (steered positions only)
//   x' = x~ + FFN(LN2(x~))

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "meltrtl/numerics.h"
#include "meltrtl/vocab.h"

namespace meltrtl {

struct ModelConfig {
  int n_layers = 6;
  int n_heads = 8;
  int d_model = 64;
  int vocab_size = kVocabSize;
  int max_context = 96;
  std::uint64_t seed = 0;

  int d_head() const { return d_model / n_heads; }
  int d_ff() const { return 4 * d_model; }
  // Throws kConfig when a field is non-positive or d_model % n_heads != 0.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// Offsets of every parameter block inside the flat parameter vector.
struct ParamLayout {
  struct Layer {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2;
  };
  std::size_t tok_emb = 0, pos_emb = 0;
  std::vector<Layer> layers;
  std::size_t lnf_g = 0, lnf_b = 0, w_out = 0, b_out = 0;
  std::size_t total = 0;

  explicit ParamLayout(const ModelConfig& c);

  struct Block {
    std::string name;
    std::size_t offset, size;
  };
  std::vector<Block> blocks() const;
};

class ModelState {
 public:
  // All parameters zero; see initialize() for a trainable starting point.
  explicit ModelState(const ModelConfig& config);
  // Linear weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), embeddings
  // ~ N(0, 1), layernorm gains 1 and biases 0.
  static ModelState initialize(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  const double* at(std::size_t offset) const { return params_.data() + offset; }

  // Q_h^l as a d_model x d_head matrix: maps head output z_h into the residual.
  Mat output_projection(int layer, int head) const;
  // Stable identifier of configuration and weights (hex CRC-32).
  std::string fingerprint() const;

 private:
  ModelConfig config_;
  ParamLayout layout_;
  std::vector<double> params_;
};

enum class SteeringMode : std::uint8_t { kStatic = 0, kDynamic = 1 };

struct PlanEntry {
  int layer = 0;
  int head = 0;
  Vec theta;  // unit norm, length d_model
  std::uint8_t sigma = 1;
};

struct SteeringPlan {
  std::vector<PlanEntry> entries;
  double alpha = 0.0;
  SteeringMode mode = SteeringMode::kStatic;

  // Throws kContract on out-of-range heads, duplicate heads, wrong theta
  // length, non-unit theta or negative alpha.
  void validate(const ModelConfig& config) const;
  // Distinct layers carrying at least one entry, ascending.
  std::vector<int> layers() const;
};

// Per-token gate for Dynamic plans: sigma for `entry` given that head's current
// activation z (length d_head) at the position being steered.
using DynamicGate = std::function<std::uint8_t(const PlanEntry& entry, std::span<const double> z)>;

// Which positions receive the steering delta.
enum class SteerScope : std::uint8_t {
  kGenerated = 0,  // positions whose logits produce generated tokens
  kAll = 1,        // every position, prompt included
};

// Everything a forward pass exposes, position-major.
struct ForwardTrace {
  int n_pos = 0;
  int n_layers = 0, n_heads = 0, d_model = 0, d_head = 0, vocab = 0;
  std::vector<double> logits;      // [pos][vocab]
  std::vector<double> taps;        // [pos][layer][head][d_head]
  std::vector<double> resid_in;    // [pos][layer + 1][d_model]: input of each layer, then final
  std::vector<double> resid_attn;  // [pos][layer][d_model]: after aggregation and steering
  std::vector<double> injected;    // [pos][layer][d_model]: steering delta actually added

  std::span<const double> logits_at(int pos) const;
  std::span<const double> tap(int pos, int layer, int head) const;
  std::span<const double> layer_taps(int pos, int layer) const;
  std::span<const double> residual_in(int pos, int layer) const;
  std::span<const double> residual_attn(int pos, int layer) const;
  std::span<const double> injected_at(int pos, int layer) const;
};

// Incremental decoder with a key/value cache. Each push() processes one
// position exactly as a full forward pass would.
class DecodeSession {
 public:
  DecodeSession(const ModelState& model, const SteeringPlan* plan = nullptr,
                DynamicGate gate = {});

  // Appends `token` at the next position, applying the plan there when
  // `steer` is set. Returns next-token logits.
  std::span<const double> push(Token token, bool steer);

  int length() const { return length_; }
  // Extra residual additions performed by steering so far (d_model per
  // intervened layer per steered position).
  std::uint64_t extra_adds() const { return extra_adds_; }
  // Record taps and residuals of subsequent pushes into `trace`.
  void record_into(ForwardTrace* trace);

 private:
  const ModelState& model_;
  const SteeringPlan* plan_;
  DynamicGate gate_;
  std::vector<std::vector<const PlanEntry*>> entries_by_layer_;
  std::vector<Vec> static_delta_;  // per layer: alpha * sum sigma theta
  std::vector<std::vector<double>> k_cache_, v_cache_;  // [layer][pos * d_model]
  int length_ = 0;
  std::uint64_t extra_adds_ = 0;
  ForwardTrace* trace_ = nullptr;

  // Scratch buffers.
  Vec x_, a_, qkv_, z_, attn_, h_, ff_, scores_, logits_, delta_;
};

ForwardTrace forward(const ModelState& model, const TokenSeq& tokens);
// Applies the plan at every position >= steer_from (default: last position only).
ForwardTrace forward_steered(const ModelState& model, const TokenSeq& tokens,
                             const SteeringPlan& plan, int steer_from = -1,
                             const DynamicGate& gate = {});

struct DecodeOptions {
  int max_new = 64;
  double temperature = 0.0;  // 0 = greedy
  std::uint64_t seed = 0;
  SteerScope scope = SteerScope::kGenerated;
};

struct Generation {
  TokenSeq tokens;
  bool hit_end = false;
  bool truncated = false;  // context filled before END
  std::vector<double> token_seconds;
  double total_seconds = 0.0;
  std::uint64_t extra_adds = 0;
};

Generation generate(const ModelState& model, const TokenSeq& prompt, const SteeringPlan* plan,
                    const DecodeOptions& options, const DynamicGate& gate = {});

// Prompt layout shared by training, harvesting and generation: spec ‖ SEP.
TokenSeq make_prompt(const TokenSeq& spec);

}  // namespace meltrtl
