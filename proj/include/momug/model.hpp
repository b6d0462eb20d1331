#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "momug/schedule.hpp"
#include "momug/tensor.hpp"

namespace momug {

struct ModelConfig {
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 512;
  int vocab_size = 0;
  int d_motion = 8;
  int max_seq_len = 512;
  int diffusion_steps = 50;
  int lora_rank = 16;
  double lora_alpha = 32.0;
  double lora_dropout = 0.1;

  double lora_scale() const { return lora_alpha / lora_rank; }
  int head_dim() const { return d_model / n_heads; }
  // Throws config_error listing the first violated constraint.
  void validate() const;
  bool same_shape(const ModelConfig& other) const;
};

enum class TaskMode { text_to_motion, motion_to_text };
enum class ElementKind : std::uint8_t { text, time, motion };

// One mixed-modality input: text tokens, a single diffusion-time slot and a
// contiguous span of motion frames bracketed as <som> time frames... <eom>.
struct MixedSequence {
  TaskMode mode = TaskMode::text_to_motion;
  std::vector<ElementKind> kinds;
  std::vector<int> tokens;        // token id at text positions, -1 elsewhere
  int timestep = 0;               // value carried by the time slot
  Mat<double> frames;             // one row per motion position, in order
  std::vector<int> text_targets;  // next-token target id per position, -1 if none

  int length() const { return static_cast<int>(kinds.size()); }
  int time_position() const;
  int motion_begin() const;
  int motion_count() const { return static_cast<int>(frames.rows()); }
  std::vector<int> target_positions() const;
  std::vector<int> target_ids() const;

  // Checks the layout invariants; throws invalid_argument on violation.
  void validate(int d_motion) const;
};

template <typename Real>
struct LoraPair {
  Mat<Real> a;  // r x d_in
  Mat<Real> b;  // d_out x r
};

template <typename Real>
struct BlockWeights {
  Mat<Real> attn_norm;  // 1 x d
  Mat<Real> wq, wk, wv, wo;
  Mat<Real> ffn_norm;   // 1 x d
  Mat<Real> w_up;       // d_ff x d
  Mat<Real> w_down;     // d x d_ff
};

// Frozen base parameters.
template <typename Real>
struct BaseWeights {
  Mat<Real> token_embedding;  // V x d
  std::vector<BlockWeights<Real>> blocks;
  Mat<Real> final_norm;       // 1 x d
  Mat<Real> lm_head;          // V x d
};

template <typename Real>
struct BlockAdapters {
  LoraPair<Real> q, k, v, o, up, down;
};

// Trainable parameters: LoRA pairs, timestep MLP and motion projections.
template <typename Real>
struct AdapterWeights {
  std::vector<BlockAdapters<Real>> blocks;
  Mat<Real> time_w1;     // d x d
  Mat<Real> time_b1;     // 1 x d
  Mat<Real> time_w2;     // d x d
  Mat<Real> time_b2;     // 1 x d
  Mat<Real> motion_in;   // d x d_motion
  Mat<Real> motion_out;  // d_motion x d
};

template <typename Real>
struct ModelState {
  ModelConfig config;
  BaseWeights<Real> base;
  AdapterWeights<Real> adapters;
};

template <typename Real>
struct NamedTensor {
  std::string name;
  Mat<Real>* tensor;
};

template <typename Real>
std::vector<NamedTensor<Real>> named_tensors(BaseWeights<Real>& w);
template <typename Real>
std::vector<NamedTensor<Real>> named_tensors(AdapterWeights<Real>& w);

template <typename Real>
BaseWeights<Real> zeros_like(const BaseWeights<Real>& w);
template <typename Real>
AdapterWeights<Real> zeros_like(const AdapterWeights<Real>& w);

template <typename Real>
std::uint64_t base_fingerprint(const BaseWeights<Real>& w);

template <typename To, typename From>
ModelState<To> convert_state(const ModelState<From>& state);

template <typename Real>
BaseWeights<Real> init_base(const ModelConfig& config, std::uint64_t seed);
template <typename Real>
AdapterWeights<Real> init_adapters(const ModelConfig& config, std::uint64_t seed);
// Base small-uniform, LoRA A small-Gaussian with B = 0, projections small-Gaussian.
template <typename Real>
ModelState<Real> init_state(const ModelConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Forward / backward.

template <typename Real>
struct EmbedTrace {
  std::vector<int> tokens;  // per position, -1 for non-text
  int time_position = -1;
  RowVec<Real> time_encoding;
  RowVec<Real> time_pre;
  RowVec<Real> time_act;
  int motion_begin = -1;
  Mat<Real> motion_input;  // frames fed through W_in (noised in T2M training)
};

template <typename Real>
struct Embedded {
  Mat<Real> hidden;  // L x d_model
  EmbedTrace<Real> trace;
};

// Embeds a mixed sequence. With `eps` the frames are treated as clean x0 and
// noised to the time slot's t; without it they are used as given (x_t).
template <typename Real>
Embedded<Real> embed_mixed(const MixedSequence& seq, const ModelState<Real>& state,
                           const NoiseSchedule& schedule, const Mat<Real>* eps = nullptr);

// Text-only embedding used for base pretraining.
template <typename Real>
Embedded<Real> embed_tokens(const std::vector<int>& tokens, const ModelState<Real>& state);

template <typename Real>
struct AdaptedLinearTrace {
  Mat<Real> mask;  // inverted-dropout mask; empty when dropout is off
  Mat<Real> mid;   // dropout(x) A^T; empty when adapters are off
};

template <typename Real>
struct BlockTrace {
  Mat<Real> x;
  Eigen::Matrix<Real, Eigen::Dynamic, 1> inv_rms1, inv_rms2;
  Mat<Real> n1, q, k, v, ctx, h, n2, up, act;
  std::vector<Mat<Real>> probs;  // per head, L x L
  AdaptedLinearTrace<Real> lq, lk, lv, lo, lup, ldown;
};

template <typename Real>
struct ForwardTrace {
  ModelConfig config;
  bool adapters_used = true;
  std::vector<BlockTrace<Real>> blocks;
  Mat<Real> final_in;
  Eigen::Matrix<Real, Eigen::Dynamic, 1> inv_rms_final;
  Mat<Real> output;  // L x d_model after the final norm
};

struct ForwardOptions {
  bool use_adapters = true;
  Rng* dropout_rng = nullptr;  // dropout is active only when set
};

// Pre-norm causal transformer over the full sequence; every projection is
// base(x) + (alpha/r) B A dropout(x) when adapters are on.
template <typename Real>
ForwardTrace<Real> forward(const Mat<Real>& hidden, const ModelState<Real>& state,
                           const ForwardOptions& options = {});

template <typename Real>
Mat<Real> lm_logits(const Mat<Real>& output, const std::vector<int>& positions, const ModelState<Real>& state);

// x0 prediction at each motion position (same position, not shifted).
template <typename Real>
Mat<Real> motion_out(const Mat<Real>& output, int motion_begin, int motion_count, const ModelState<Real>& state);

template <typename Real>
struct Gradients {
  AdapterWeights<Real> adapters;
  std::optional<BaseWeights<Real>> base;  // present only when base grads are wanted
};

template <typename Real>
Gradients<Real> zero_gradients(const ModelState<Real>& state, bool with_base);

// Upstream gradients of the loss w.r.t. the two heads.
template <typename Real>
struct HeadGradients {
  std::vector<int> text_positions;
  Mat<Real> d_logits;  // |text_positions| x V
  Mat<Real> d_motion;  // motion_count x d_motion, or empty
};

// Reverse-mode pass; accumulates into `grads`. Base parameters get gradients
// only when grads.base is engaged.
template <typename Real>
void backward(const ModelState<Real>& state, const EmbedTrace<Real>& embed, const ForwardTrace<Real>& trace,
              const HeadGradients<Real>& heads, Gradients<Real>& grads);

// Attention probabilities for one layer/head, for tests.
template <typename Real>
const Mat<Real>& attention_probs(const ForwardTrace<Real>& trace, int layer, int head);

}  // namespace momug
