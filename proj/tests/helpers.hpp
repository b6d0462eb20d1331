#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "momug/corpus.hpp"
#include "momug/model.hpp"
#include "momug/training.hpp"

namespace momug::test {

inline ModelConfig tiny_config(int vocab_size, int d_motion = 8) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = vocab_size;
  c.d_motion = d_motion;
  c.max_seq_len = 128;
  c.diffusion_steps = 50;
  c.lora_rank = 4;
  c.lora_alpha = 8.0;
  c.lora_dropout = 0.1;
  return c;
}

// LoRA B starts at zero; nudge it so every gradient path is live.
template <typename Real>
void perturb_lora_b(ModelState<Real>& s, std::uint64_t seed, double scale = 0.1) {
  Rng rng(seed, "test.perturb");
  for (auto& b : s.adapters.blocks)
    for (auto* p : {&b.q, &b.k, &b.v, &b.o, &b.up, &b.down})
      p->b = rng.normal_matrix<Real>(p->b.rows(), p->b.cols()) * static_cast<Real>(scale);
}

// One mixed batch: a conditioned T2M, a dropped T2M and an M2T example.
inline Batch mixed_batch(const Corpus& corpus, const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed, "test.batch");
  Batch batch;
  const auto& p0 = corpus.pairs[0];
  const auto& p1 = corpus.pairs[1];
  auto clip = [&](const MotionSequence& m) {
    MotionSequence out;
    out.frames = m.frames.topRows(std::min<Eigen::Index>(m.frames.rows(), 6));
    return out;
  };
  auto a = build_example(p0.caption.token_ids, clip(p0.motion), TaskMode::text_to_motion, 7, false, corpus.vocab,
                         c.max_seq_len);
  a.eps = rng.normal_matrix<double>(a.motion_target.rows(), a.motion_target.cols());
  auto b = build_example(p1.caption.token_ids, clip(p1.motion), TaskMode::text_to_motion, 31, true, corpus.vocab,
                         c.max_seq_len);
  b.eps = rng.normal_matrix<double>(b.motion_target.rows(), b.motion_target.cols());
  auto m = build_example(p1.caption.token_ids, clip(p1.motion), TaskMode::motion_to_text, 0, false, corpus.vocab,
                         c.max_seq_len);
  batch.examples = {a, b, m};
  return batch;
}

struct GradCheck {
  double max_rel = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

// Central differences against the analytic gradient for every scalar of the
// selected parameter set. Dropout masks come from a fixed seed per evaluation.
inline GradCheck finite_difference_check(ModelState<double>& state, const Batch& batch, const TrainConfig& cfg,
                                         const NoiseSchedule& schedule, bool base, double h = 1e-5) {
  auto loss = [&]() {
    Rng drop(99, "test.dropout");
    auto g = zero_gradients(state, false);
    return batch_loss_and_grads(state, batch, cfg, schedule, &drop, g).total;
  };
  auto grads = zero_gradients(state, base);
  {
    Rng drop(99, "test.dropout");
    batch_loss_and_grads(state, batch, cfg, schedule, &drop, grads);
  }
  auto params = base ? named_tensors(state.base) : named_tensors(state.adapters);
  auto gts = base ? named_tensors(*grads.base) : named_tensors(grads.adapters);
  GradCheck out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i].tensor;
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      const double orig = p.data()[k];
      p.data()[k] = orig + h;
      const double up = loss();
      p.data()[k] = orig - h;
      const double down = loss();
      p.data()[k] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = gts[i].tensor->data()[k];
      const double rel =
          std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      if (rel > out.max_rel) {
        out.max_rel = rel;
        out.worst = params[i].name + "[" + std::to_string(k) + "] analytic=" + std::to_string(analytic) +
                    " numeric=" + std::to_string(numeric);
      }
      ++out.checked;
    }
  }
  return out;
}

}  // namespace momug::test
