#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "momug/corpus.hpp"
#include "momug/model.hpp"
#include "momug/schedule.hpp"

namespace momug {

struct TrainConfig {
  double lambda = 0.01;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 1e-3;
  int batch_size = 64;
  int epochs = 1;
  double warmup_frac = 0.10;
  double grad_clip = 1.0;
  double cfg_drop_prob = 0.10;
  int ratio_t2m = 6;
  int ratio_m2t = 4;
  std::uint64_t seed = 0;
  // Teacher-forced L_LM over the prompt/caption region of text-to-motion examples.
  bool t2m_text_loss = true;
  int checkpoint_every = 0;  // steps; 0 = only the final checkpoint

  void validate() const;
};

// A mixed sequence plus what the losses compare against.
struct TrainingExample {
  MixedSequence sequence;      // frames hold clean x0 (noised at embed time with `eps`)
  Mat<double> motion_target;   // x0 over the motion span
  Mat<double> eps;             // forward-process noise; empty for motion-to-text
  bool ddpm_present = false;
};

// Layouts:
//   T2M: <bos> prompt caption|<nul> <som> time(t) frames... <eom>
//   M2T: <bos> prompt <som> time(0) frames... <eom> caption <eos>
TrainingExample build_example(const std::vector<int>& caption_ids, const MotionSequence& motion, TaskMode mode,
                              int t, bool drop_condition, const Vocabulary& vocab, int max_seq_len = 512,
                              bool t2m_text_loss = true);

// Mean negative log-softmax of `targets` over rows where mask is set; empty mask gives 0.
template <typename Real>
double lm_loss(const Mat<Real>& logits, std::span<const int> targets, std::span<const bool> mask);

// Mean squared error over entries of frames where mask is set.
template <typename Real>
double ddpm_loss(const Mat<Real>& x0, const Mat<Real>& x0_hat, std::span<const bool> frame_mask);

inline double total_loss(double lm, double ddpm, double lambda) { return lambda * lm + ddpm; }

TaskMode sample_mode(Rng& rng, int ratio_t2m, int ratio_m2t);

// Linear warmup over the first warmup_frac of steps, cosine decay to 0 after.
double learning_rate(int step, int total_steps, double base_lr, double warmup_frac);

template <typename Real>
class AdamW {
 public:
  AdamW(const std::vector<NamedTensor<Real>>& params, const TrainConfig& config);
  // Applies one decoupled-weight-decay Adam update; grads are parallel to params.
  void step(const std::vector<NamedTensor<Real>>& params, const std::vector<NamedTensor<Real>>& grads, double lr);
  int steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  int t_ = 0;
  std::vector<Mat<Real>> m_, v_;
};

// Global L2 norm over tensors; scales them in place when above max_norm. Returns the pre-clip norm.
template <typename Real>
double clip_grad_norm(const std::vector<NamedTensor<Real>>& grads, double max_norm);

struct Batch {
  std::vector<TrainingExample> examples;
};

// Per-example mode, timestep, condition dropout and noise, all drawn from `rng`.
Batch make_batch(std::span<const CorpusPair> pairs, std::span<const std::size_t> indices, Rng& rng,
                 const TrainConfig& config, const NoiseSchedule& schedule, const Vocabulary& vocab,
                 int max_seq_len);

struct StepReport {
  int step = 0;
  int n_t2m = 0;
  int n_m2t = 0;
  double lm_loss = 0.0;
  double ddpm_loss = 0.0;
  double weighted_lm = 0.0;  // lambda * lm_loss
  double total = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

// Loss and gradients for a batch without touching the weights.
template <typename Real>
StepReport batch_loss_and_grads(const ModelState<Real>& state, const Batch& batch, const TrainConfig& config,
                                const NoiseSchedule& schedule, Rng* dropout_rng, Gradients<Real>& grads);

// Forward, losses, backward, clip, AdamW on the trainable set only.
template <typename Real>
StepReport train_step(ModelState<Real>& state, AdamW<Real>& optimizer, const Batch& batch, const TrainConfig& config,
                      const NoiseSchedule& schedule, int step, int total_steps);

struct TrainCallbacks {
  // Return false to stop early.
  std::function<bool(const StepReport&)> on_step;
  std::function<void(int step, const ModelState<float>&)> on_checkpoint;
};

int steps_per_epoch(std::size_t n_examples, int batch_size);

// Algorithm-1 loop over a normalized training set for a fixed epoch budget.
std::vector<StepReport> train_loop(ModelState<float>& state, std::span<const CorpusPair> pairs,
                                   const TrainConfig& config, const NoiseSchedule& schedule,
                                   const Vocabulary& vocab, const TrainCallbacks& callbacks = {});

// Trains every base parameter with L_LM on "<bos> caption <eos>" sequences.
BaseWeights<float> pretrain_base(const ModelConfig& model_config, std::span<const CorpusPair> pairs,
                                 const TrainConfig& config, std::uint64_t init_seed,
                                 const std::function<bool(const StepReport&)>& on_step = {});

}  // namespace momug
