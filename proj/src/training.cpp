#include "momug/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "momug/error.hpp"

namespace momug {
namespace {

template <typename Real>
Mat<Real> cast_or_empty(const Mat<double>& m) {
  return m.size() == 0 ? Mat<Real>() : Mat<Real>(m.template cast<Real>());
}

// Sum of -log softmax(logits)[target] over rows; writes softmax - onehot into d_logits.
template <typename Real>
double cross_entropy_sum(const Mat<Real>& logits, std::span<const int> targets, Mat<Real>* d_logits) {
  double total = 0.0;
  if (d_logits) d_logits->resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Real mx = logits.row(i).maxCoeff();
    double z = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) z += std::exp(static_cast<double>(logits(i, j) - mx));
    const int y = targets[static_cast<std::size_t>(i)];
    total += std::log(z) - static_cast<double>(logits(i, y) - mx);
    if (d_logits) {
      for (Eigen::Index j = 0; j < logits.cols(); ++j)
        (*d_logits)(i, j) = static_cast<Real>(std::exp(static_cast<double>(logits(i, j) - mx)) / z);
      (*d_logits)(i, y) -= Real(1);
    }
  }
  return total;
}

std::vector<int> prompt_ids(std::string_view prompt, const Vocabulary& vocab) { return tokenize(prompt, vocab); }

void push_text(MixedSequence& s, int id) {
  s.kinds.push_back(ElementKind::text);
  s.tokens.push_back(id);
  s.text_targets.push_back(-1);
}

template <typename Real>
std::vector<NamedTensor<Real>> adapter_tensors(ModelState<Real>& s) {
  return named_tensors(s.adapters);
}

void check_finite_report(const StepReport& r) {
  if (!std::isfinite(r.lm_loss) || !std::isfinite(r.ddpm_loss) || !std::isfinite(r.total) ||
      !std::isfinite(r.grad_norm)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << r.step << ": lm_loss=" << r.lm_loss << " ddpm_loss=" << r.ddpm_loss
        << " total=" << r.total << " grad_norm=" << r.grad_norm << " (t2m=" << r.n_t2m << ", m2t=" << r.n_m2t << ")";
    fail(ErrorCode::non_finite, msg.str());
  }
}

}  // namespace

void TrainConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorCode::config_error, msg); };
  check(lambda > 0.0, "train.lambda must be > 0");
  check(lr >= 0.0, "train.lr must be >= 0");
  check(beta1 >= 0.0 && beta1 < 1.0, "train.beta1 must be in [0, 1)");
  check(beta2 >= 0.0 && beta2 < 1.0, "train.beta2 must be in [0, 1)");
  check(adam_eps > 0.0, "train.adam_eps must be > 0");
  check(weight_decay >= 0.0, "train.weight_decay must be >= 0");
  check(batch_size >= 1, "train.batch_size must be >= 1");
  check(epochs >= 0, "train.epochs must be >= 0");
  check(warmup_frac >= 0.0 && warmup_frac <= 1.0, "train.warmup_frac must be in [0, 1]");
  check(grad_clip > 0.0, "train.grad_clip must be > 0");
  check(cfg_drop_prob >= 0.0 && cfg_drop_prob < 1.0, "train.cfg_drop_prob must be in [0, 1)");
  check(ratio_t2m > 0 && ratio_m2t > 0, "train.ratio_t2m and train.ratio_m2t must be positive");
  check(checkpoint_every >= 0, "train.checkpoint_every must be >= 0");
}

TrainingExample build_example(const std::vector<int>& caption_ids, const MotionSequence& motion, TaskMode mode,
                              int t, bool drop_condition, const Vocabulary& vocab, int max_seq_len,
                              bool t2m_text_loss) {
  require(motion.n_frames() >= 1, ErrorCode::invalid_argument, "motion needs at least one frame");
  if (mode == TaskMode::text_to_motion)
    require(t >= 1, ErrorCode::invalid_argument, "text-to-motion examples need t >= 1");
  else
    require(t == 0, ErrorCode::invalid_argument, "motion-to-text examples need t = 0");
  for (int id : caption_ids)
    require(id >= Vocabulary::kNumSpecial && id < vocab.size(), ErrorCode::invalid_argument,
            "caption contains a special or unknown token id");

  TrainingExample ex;
  auto& s = ex.sequence;
  s.mode = mode;
  s.timestep = t;
  s.frames = motion.frames;
  push_text(s, Vocabulary::kBos);
  const bool t2m = mode == TaskMode::text_to_motion;
  for (int id : prompt_ids(t2m ? kTextToMotionPrompt : kMotionToTextPrompt, vocab)) push_text(s, id);
  if (t2m) {
    if (drop_condition) {
      push_text(s, Vocabulary::kNul);
    } else {
      for (int id : caption_ids) push_text(s, id);
    }
  }
  const int som_pos = s.length();
  push_text(s, Vocabulary::kSom);
  s.kinds.push_back(ElementKind::time);
  s.tokens.push_back(-1);
  s.text_targets.push_back(-1);
  for (int i = 0; i < motion.n_frames(); ++i) {
    s.kinds.push_back(ElementKind::motion);
    s.tokens.push_back(-1);
    s.text_targets.push_back(-1);
  }
  const int eom_pos = s.length();
  push_text(s, Vocabulary::kEom);

  if (t2m) {
    if (t2m_text_loss) {
      for (int p = 0; p < som_pos; ++p) {
        const int next = s.tokens[static_cast<std::size_t>(p + 1)];
        if (next != Vocabulary::kNul) s.text_targets[static_cast<std::size_t>(p)] = next;
      }
    }
    ex.ddpm_present = true;
    ex.motion_target = motion.frames;
  } else {
    for (int id : caption_ids) push_text(s, id);
    push_text(s, Vocabulary::kEos);
    for (int p = eom_pos; p < s.length() - 1; ++p)
      s.text_targets[static_cast<std::size_t>(p)] = s.tokens[static_cast<std::size_t>(p + 1)];
    ex.ddpm_present = false;
  }
  require(s.length() <= max_seq_len, ErrorCode::out_of_range,
          "example length " + std::to_string(s.length()) + " exceeds max_seq_len " + std::to_string(max_seq_len));
  return ex;
}

template <typename Real>
double lm_loss(const Mat<Real>& logits, std::span<const int> targets, std::span<const bool> mask) {
  require(targets.size() == static_cast<std::size_t>(logits.rows()) && mask.size() == targets.size(),
          ErrorCode::shape_mismatch, "lm_loss: logits, targets and mask must align");
  double total = 0.0;
  int count = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const int y = targets[static_cast<std::size_t>(i)];
    require(y >= 0 && y < logits.cols(), ErrorCode::out_of_range, "lm_loss: target id out of range");
    total += cross_entropy_sum<Real>(logits.row(i), std::span<const int>(&y, 1), nullptr);
    ++count;
  }
  return count == 0 ? 0.0 : total / count;
}

template <typename Real>
double ddpm_loss(const Mat<Real>& x0, const Mat<Real>& x0_hat, std::span<const bool> frame_mask) {
  require(x0.rows() == x0_hat.rows() && x0.cols() == x0_hat.cols() &&
              frame_mask.size() == static_cast<std::size_t>(x0.rows()),
          ErrorCode::shape_mismatch, "ddpm_loss: shapes must align");
  double total = 0.0;
  std::size_t count = 0;
  for (Eigen::Index i = 0; i < x0.rows(); ++i) {
    if (!frame_mask[static_cast<std::size_t>(i)]) continue;
    for (Eigen::Index j = 0; j < x0.cols(); ++j) {
      const double d = static_cast<double>(x0_hat(i, j)) - static_cast<double>(x0(i, j));
      total += d * d;
    }
    count += static_cast<std::size_t>(x0.cols());
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

TaskMode sample_mode(Rng& rng, int ratio_t2m, int ratio_m2t) {
  const double p = static_cast<double>(ratio_t2m) / (ratio_t2m + ratio_m2t);
  return rng.bernoulli(p) ? TaskMode::text_to_motion : TaskMode::motion_to_text;
}

double learning_rate(int step, int total_steps, double base_lr, double warmup_frac) {
  if (total_steps <= 0) return base_lr;
  const int warmup = static_cast<int>(std::lround(warmup_frac * total_steps));
  if (step < warmup) return base_lr * static_cast<double>(step) / warmup;
  const double progress = static_cast<double>(step - warmup) / std::max(1, total_steps - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(kPi * std::min(1.0, progress)));
}

template <typename Real>
AdamW<Real>::AdamW(const std::vector<NamedTensor<Real>>& params, const TrainConfig& config)
    : beta1_(config.beta1), beta2_(config.beta2), eps_(config.adam_eps), weight_decay_(config.weight_decay) {
  for (const auto& p : params) {
    m_.push_back(Mat<Real>::Zero(p.tensor->rows(), p.tensor->cols()));
    v_.push_back(Mat<Real>::Zero(p.tensor->rows(), p.tensor->cols()));
  }
}

template <typename Real>
void AdamW<Real>::step(const std::vector<NamedTensor<Real>>& params, const std::vector<NamedTensor<Real>>& grads,
                       double lr) {
  require(params.size() == m_.size() && grads.size() == m_.size(), ErrorCode::state_mismatch,
          "optimizer was built for a different parameter set");
  ++t_;
  const Real b1 = static_cast<Real>(beta1_), b2 = static_cast<Real>(beta2_);
  const Real c1 = static_cast<Real>(1.0 / (1.0 - std::pow(beta1_, t_)));
  const Real c2 = static_cast<Real>(1.0 / (1.0 - std::pow(beta2_, t_)));
  const Real step = static_cast<Real>(lr);
  const Real decay = static_cast<Real>(1.0 - lr * weight_decay_);
  const Real eps = static_cast<Real>(eps_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i].tensor;
    const auto& g = *grads[i].tensor;
    m_[i] = b1 * m_[i] + (Real(1) - b1) * g;
    v_[i] = b2 * v_[i] + (Real(1) - b2) * g.cwiseAbs2();
    p *= decay;
    p.array() -= step * (m_[i].array() * c1) / ((v_[i].array() * c2).sqrt() + eps);
  }
}

template <typename Real>
double clip_grad_norm(const std::vector<NamedTensor<Real>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.tensor->template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && std::isfinite(norm)) {
    const Real factor = static_cast<Real>(max_norm / (norm + 1e-6));
    for (const auto& g : grads) *g.tensor *= factor;
  }
  return norm;
}

Batch make_batch(std::span<const CorpusPair> pairs, std::span<const std::size_t> indices, Rng& rng,
                 const TrainConfig& config, const NoiseSchedule& schedule, const Vocabulary& vocab, int max_seq_len) {
  Batch batch;
  batch.examples.reserve(indices.size());
  for (std::size_t idx : indices) {
    const auto& pair = pairs[idx];
    const TaskMode mode = sample_mode(rng, config.ratio_t2m, config.ratio_m2t);
    if (mode == TaskMode::text_to_motion) {
      const int t = rng.uniform_int(1, schedule.steps);
      const bool drop = rng.bernoulli(config.cfg_drop_prob);
      auto ex = build_example(pair.caption.token_ids, pair.motion, mode, t, drop, vocab, max_seq_len,
                              config.t2m_text_loss);
      ex.eps = rng.normal_matrix<double>(pair.motion.n_frames(), pair.motion.feature_dim());
      batch.examples.push_back(std::move(ex));
    } else {
      batch.examples.push_back(
          build_example(pair.caption.token_ids, pair.motion, mode, 0, false, vocab, max_seq_len, true));
    }
  }
  return batch;
}

template <typename Real>
StepReport batch_loss_and_grads(const ModelState<Real>& state, const Batch& batch, const TrainConfig& config,
                                const NoiseSchedule& schedule, Rng* dropout_rng, Gradients<Real>& grads) {
  std::size_t n_text = 0, n_motion = 0;
  StepReport report;
  for (const auto& ex : batch.examples) {
    n_text += ex.sequence.target_positions().size();
    if (ex.ddpm_present) n_motion += static_cast<std::size_t>(ex.motion_target.size());
    (ex.sequence.mode == TaskMode::text_to_motion ? report.n_t2m : report.n_m2t) += 1;
  }
  const Real lm_scale = n_text ? static_cast<Real>(config.lambda / static_cast<double>(n_text)) : Real(0);
  const Real ddpm_scale = n_motion ? static_cast<Real>(2.0 / static_cast<double>(n_motion)) : Real(0);

  double lm_sum = 0.0, sq_sum = 0.0;
  for (const auto& ex : batch.examples) {
    const auto& seq = ex.sequence;
    const Mat<Real> eps = cast_or_empty<Real>(ex.eps);
    const auto emb = embed_mixed(seq, state, schedule, ex.eps.size() ? &eps : nullptr);
    const auto trace = forward(emb.hidden, state, ForwardOptions{true, dropout_rng});

    HeadGradients<Real> heads;
    heads.text_positions = seq.target_positions();
    const auto targets = seq.target_ids();
    if (!heads.text_positions.empty()) {
      const Mat<Real> logits = lm_logits(trace.output, heads.text_positions, state);
      lm_sum += cross_entropy_sum<Real>(logits, targets, &heads.d_logits);
      heads.d_logits *= lm_scale;
    } else {
      heads.d_logits.resize(0, state.config.vocab_size);
    }
    if (ex.ddpm_present) {
      const Mat<Real> pred = motion_out(trace.output, seq.motion_begin(), seq.motion_count(), state);
      const Mat<Real> diff = pred - ex.motion_target.template cast<Real>();
      sq_sum += diff.template cast<double>().squaredNorm();
      heads.d_motion = ddpm_scale * diff;
    }
    backward(state, emb.trace, trace, heads, grads);
  }
  report.lm_loss = n_text ? lm_sum / static_cast<double>(n_text) : 0.0;
  report.ddpm_loss = n_motion ? sq_sum / static_cast<double>(n_motion) : 0.0;
  report.weighted_lm = config.lambda * report.lm_loss;
  report.total = total_loss(report.lm_loss, report.ddpm_loss, config.lambda);
  return report;
}

template <typename Real>
StepReport train_step(ModelState<Real>& state, AdamW<Real>& optimizer, const Batch& batch, const TrainConfig& config,
                      const NoiseSchedule& schedule, int step, int total_steps) {
  Rng dropout_rng(config.seed, "dropout", static_cast<std::uint64_t>(step));
  auto grads = zero_gradients(state, false);
  StepReport report = batch_loss_and_grads(state, batch, config, schedule, &dropout_rng, grads);
  report.step = step;
  const auto grad_tensors = named_tensors(grads.adapters);
  report.grad_norm = clip_grad_norm(grad_tensors, config.grad_clip);
  check_finite_report(report);
  report.lr = learning_rate(step, total_steps, config.lr, config.warmup_frac);
  optimizer.step(adapter_tensors(state), grad_tensors, report.lr);
  return report;
}

int steps_per_epoch(std::size_t n_examples, int batch_size) {
  return static_cast<int>((n_examples + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size));
}

std::vector<StepReport> train_loop(ModelState<float>& state, std::span<const CorpusPair> pairs,
                                   const TrainConfig& config, const NoiseSchedule& schedule,
                                   const Vocabulary& vocab, const TrainCallbacks& callbacks) {
  config.validate();
  require(!pairs.empty(), ErrorCode::invalid_argument, "training set is empty");
  const int spe = steps_per_epoch(pairs.size(), config.batch_size);
  const int total = spe * config.epochs;
  AdamW<float> optimizer(named_tensors(state.adapters), config);
  std::vector<StepReport> reports;
  std::vector<std::size_t> order(pairs.size());
  int step = 0;
  bool stop = false;
  for (int epoch = 0; epoch < config.epochs && !stop; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(config.seed, "shuffle", static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    for (int b = 0; b < spe && !stop; ++b, ++step) {
      const std::size_t lo = static_cast<std::size_t>(b) * static_cast<std::size_t>(config.batch_size);
      const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(config.batch_size));
      Rng batch_rng(config.seed, "batch", static_cast<std::uint64_t>(step));
      const Batch batch = make_batch(pairs, std::span<const std::size_t>(order.data() + lo, hi - lo), batch_rng,
                                     config, schedule, vocab, state.config.max_seq_len);
      reports.push_back(train_step(state, optimizer, batch, config, schedule, step, total));
      if (callbacks.on_step && !callbacks.on_step(reports.back())) stop = true;
      if (callbacks.on_checkpoint && config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 &&
          step + 1 < total)
        callbacks.on_checkpoint(step + 1, state);
    }
  }
  if (callbacks.on_checkpoint) callbacks.on_checkpoint(step, state);
  return reports;
}

BaseWeights<float> pretrain_base(const ModelConfig& model_config, std::span<const CorpusPair> pairs,
                                 const TrainConfig& config, std::uint64_t init_seed,
                                 const std::function<bool(const StepReport&)>& on_step) {
  config.validate();
  require(!pairs.empty(), ErrorCode::invalid_argument, "pretraining set is empty");
  ModelState<float> state;
  state.config = model_config;
  state.base = init_base<float>(model_config, init_seed);
  auto params = named_tensors(state.base);
  AdamW<float> optimizer(params, config);
  const int spe = steps_per_epoch(pairs.size(), config.batch_size);
  const int total = spe * config.epochs;
  std::vector<std::size_t> order(pairs.size());
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(config.seed, "pretrain.shuffle", static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    for (int b = 0; b < spe; ++b, ++step) {
      const std::size_t lo = static_cast<std::size_t>(b) * static_cast<std::size_t>(config.batch_size);
      const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(config.batch_size));
      std::size_t n_targets = 0;
      for (std::size_t i = lo; i < hi; ++i) n_targets += pairs[order[i]].caption.token_ids.size() + 1;
      const float scale = 1.0F / static_cast<float>(n_targets);
      auto grads = zero_gradients(state, true);
      double loss = 0.0;
      for (std::size_t i = lo; i < hi; ++i) {
        std::vector<int> tokens{Vocabulary::kBos};
        const auto& ids = pairs[order[i]].caption.token_ids;
        tokens.insert(tokens.end(), ids.begin(), ids.end());
        tokens.push_back(Vocabulary::kEos);
        const auto emb = embed_tokens(tokens, state);
        const auto trace = forward(emb.hidden, state, ForwardOptions{false, nullptr});
        HeadGradients<float> heads;
        for (std::size_t p = 0; p + 1 < tokens.size(); ++p) heads.text_positions.push_back(static_cast<int>(p));
        const std::vector<int> targets(tokens.begin() + 1, tokens.end());
        const Mat<float> logits = lm_logits(trace.output, heads.text_positions, state);
        loss += cross_entropy_sum<float>(logits, targets, &heads.d_logits);
        heads.d_logits *= scale;
        backward(state, emb.trace, trace, heads, grads);
      }
      StepReport r;
      r.step = step;
      r.lm_loss = loss / static_cast<double>(n_targets);
      r.total = r.lm_loss;
      const auto grad_tensors = named_tensors(*grads.base);
      r.grad_norm = clip_grad_norm(grad_tensors, config.grad_clip);
      check_finite_report(r);
      r.lr = learning_rate(step, total, config.lr, config.warmup_frac);
      optimizer.step(params, grad_tensors, r.lr);
      if (on_step && !on_step(r)) return state.base;
    }
  }
  return state.base;
}

#define MOMUG_INSTANTIATE(Real)                                                                                   \
  template double lm_loss(const Mat<Real>&, std::span<const int>, std::span<const bool>);                         \
  template double ddpm_loss(const Mat<Real>&, const Mat<Real>&, std::span<const bool>);                           \
  template class AdamW<Real>;                                                                                     \
  template double clip_grad_norm(const std::vector<NamedTensor<Real>>&, double);                                  \
  template StepReport batch_loss_and_grads(const ModelState<Real>&, const Batch&, const TrainConfig&,             \
                                           const NoiseSchedule&, Rng*, Gradients<Real>&);                         \
  template StepReport train_step(ModelState<Real>&, AdamW<Real>&, const Batch&, const TrainConfig&,               \
                                 const NoiseSchedule&, int, int);
MOMUG_INSTANTIATE(float)
MOMUG_INSTANTIATE(double)
#undef MOMUG_INSTANTIATE

}  // namespace momug
