#include "momug/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "momug/error.hpp"
#include "momug/training.hpp"

namespace momug {
namespace {

bool selectable(int id) {
  return id == Vocabulary::kEos || id == Vocabulary::kSom || id >= Vocabulary::kNumSpecial;
}

template <typename Real>
Mat<double> predict_x0(const std::vector<int>& caption_ids, bool drop, const Mat<double>& x_t, int t,
                       const ModelState<Real>& state, const NoiseSchedule& schedule, const Vocabulary& vocab) {
  MotionSequence m;
  m.frames = x_t;
  const auto ex = build_example(caption_ids, m, TaskMode::text_to_motion, t, drop, vocab, state.config.max_seq_len);
  const auto emb = embed_mixed(ex.sequence, state, schedule);
  const auto trace = forward(emb.hidden, state, ForwardOptions{true, nullptr});
  return motion_out(trace.output, ex.sequence.motion_begin(), ex.sequence.motion_count(), state)
      .template cast<double>();
}

template <typename Real>
Mat<double> reverse_chain(const std::vector<int>& caption_ids, int length, const Mat<double>* x0_known,
                          const std::vector<bool>* known, const ModelState<Real>& state,
                          const NoiseSchedule& schedule, const Vocabulary& vocab, const SampleConfig& cfg,
                          SampleTrace* trace) {
  cfg.validate();
  const int d = state.config.d_motion;
  require(length >= 1 && length + 16 <= state.config.max_seq_len, ErrorCode::out_of_range,
          "motion length " + std::to_string(length) + " does not fit the model");
  require(schedule.steps == state.config.diffusion_steps, ErrorCode::state_mismatch,
          "schedule length does not match the model's diffusion_steps");

  Rng rng(cfg.seed, "sample");
  Rng inpaint_rng(cfg.seed, "inpaint");
  std::vector<Eigen::Index> known_rows;
  if (known)
    for (std::size_t i = 0; i < known->size(); ++i)
      if ((*known)[i]) known_rows.push_back(static_cast<Eigen::Index>(i));

  // Re-noise the known frames to level t (t = 0 gives them back exactly).
  auto clamp_known = [&](Mat<double>& x, int t) {
    for (auto r : known_rows) {
      const Mat<double> eps = inpaint_rng.normal_matrix<double>(1, d);
      x.row(r) = q_sample_any<double>(x0_known->row(r), t, eps, schedule);
    }
  };

  Mat<double> x = rng.normal_matrix<double>(length, d);
  clamp_known(x, schedule.steps);
  if (trace) *trace = SampleTrace{};
  for (int t = schedule.steps; t >= 1; --t) {
    Mat<double> cond, uncond, guided;
    switch (cfg.guidance) {
      case Guidance::guided:
        cond = predict_x0(caption_ids, false, x, t, state, schedule, vocab);
        uncond = predict_x0(caption_ids, true, x, t, state, schedule, vocab);
        guided = guided_x0(cond, uncond, cfg.cfg_scale);
        break;
      case Guidance::conditional_only:
        cond = predict_x0(caption_ids, false, x, t, state, schedule, vocab);
        guided = cond;
        break;
      case Guidance::unconditional_only:
        uncond = predict_x0(caption_ids, true, x, t, state, schedule, vocab);
        guided = uncond;
        break;
    }
    require(guided.allFinite(), ErrorCode::non_finite, "x0 prediction is not finite at t=" + std::to_string(t));
    if (trace) {
      trace->timesteps.push_back(t);
      trace->x_t.push_back(x);
      trace->x0_cond.push_back(cond);
      trace->x0_uncond.push_back(uncond);
      trace->x0_guided.push_back(guided);
    }
    const Mat<double> z = t > 1 ? rng.normal_matrix<double>(length, d) : Mat<double>::Zero(length, d);
    x = posterior_sample<double>(x, guided, t, z, schedule);
    clamp_known(x, t - 1);
  }
  return x;
}

}  // namespace

void SampleConfig::validate() const {
  require(cfg_scale >= 0.0 && std::isfinite(cfg_scale), ErrorCode::config_error, "sample.cfg_scale must be >= 0");
  require(motion_length >= 0, ErrorCode::config_error, "sample.motion_length must be >= 0");
  require(max_text_len >= 1, ErrorCode::config_error, "sample.max_text_len must be >= 1");
  if (decode.kind != DecodeKind::greedy)
    require(decode.temperature > 0.0, ErrorCode::config_error, "sample.temperature must be > 0");
  if (decode.kind == DecodeKind::top_k)
    require(decode.top_k >= 1, ErrorCode::config_error, "sample.top_k must be >= 1");
}

Mat<double> guided_x0(const Mat<double>& cond, const Mat<double>& uncond, double scale) {
  require(cond.rows() == uncond.rows() && cond.cols() == uncond.cols(), ErrorCode::shape_mismatch,
          "guided_x0: prediction shapes differ");
  return (1.0 - scale) * uncond + scale * cond;
}

int resolve_motion_length(const SampleConfig& cfg, const CorpusStats& stats) {
  if (cfg.motion_length > 0) {
    if (!stats.length_histogram.empty()) {
      const int lo = stats.length_histogram.begin()->first, hi = stats.length_histogram.rbegin()->first;
      require(cfg.motion_length >= lo && cfg.motion_length <= hi, ErrorCode::out_of_range,
              "motion length " + std::to_string(cfg.motion_length) + " outside corpus bounds [" +
                  std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
    return cfg.motion_length;
  }
  Rng rng(cfg.seed, "length");
  return stats.sample_length(rng);
}

template <typename Real>
Mat<double> sample_motion(const std::vector<int>& caption_ids, int length, const ModelState<Real>& state,
                          const NoiseSchedule& schedule, const Vocabulary& vocab, const SampleConfig& cfg,
                          SampleTrace* trace) {
  return reverse_chain(caption_ids, length, nullptr, nullptr, state, schedule, vocab, cfg, trace);
}

template <typename Real>
Mat<double> inpaint_motion(const Mat<double>& x0_known, const std::vector<bool>& known,
                           const std::vector<int>& caption_ids, const ModelState<Real>& state,
                           const NoiseSchedule& schedule, const Vocabulary& vocab, const SampleConfig& cfg,
                           SampleTrace* trace) {
  require(known.size() == static_cast<std::size_t>(x0_known.rows()), ErrorCode::shape_mismatch,
          "inpaint mask length differs from the motion length");
  require(x0_known.cols() == state.config.d_motion, ErrorCode::shape_mismatch,
          "inpaint motion width differs from d_motion");
  return reverse_chain(caption_ids, static_cast<int>(x0_known.rows()), &x0_known, &known, state, schedule, vocab,
                       cfg, trace);
}

int choose_token(const RowVec<double>& logits, const DecodeConfig& decode, Rng& rng) {
  std::vector<int> ids;
  for (int i = 0; i < logits.size(); ++i)
    if (selectable(i)) ids.push_back(i);
  require(!ids.empty(), ErrorCode::invalid_argument, "no selectable tokens");
  // Stable order: higher logit first, lower id on ties.
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return logits(a) > logits(b); });
  if (decode.kind == DecodeKind::greedy) return ids.front();
  if (decode.kind == DecodeKind::top_k) ids.resize(std::min<std::size_t>(ids.size(), decode.top_k));
  const double top = logits(ids.front());
  std::vector<double> w(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) w[i] = std::exp((logits(ids[i]) - top) / decode.temperature);
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (u < w[i]) return ids[i];
    u -= w[i];
  }
  return ids.front();
}

template <typename Real>
TextSample sample_text(const Mat<double>& frames, const ModelState<Real>& state, const NoiseSchedule& schedule,
                       const Vocabulary& vocab, const SampleConfig& cfg) {
  cfg.validate();
  require(frames.cols() == state.config.d_motion, ErrorCode::shape_mismatch, "motion width differs from d_motion");
  require(frames.allFinite(), ErrorCode::non_finite, "motion frames are not finite");
  MotionSequence m;
  m.frames = frames;
  auto seq = build_example({}, m, TaskMode::motion_to_text, 0, false, vocab, state.config.max_seq_len).sequence;
  // Drop the trailing <eos>; decoding continues after <eom>.
  seq.kinds.pop_back();
  seq.tokens.pop_back();
  seq.text_targets.assign(seq.kinds.size(), -1);

  Rng rng(cfg.seed, "decode");
  TextSample out;
  out.truncated = true;
  for (int step = 0; step < cfg.max_text_len; ++step) {
    require(seq.length() < state.config.max_seq_len, ErrorCode::out_of_range, "caption exceeds max_seq_len");
    const auto emb = embed_mixed(seq, state, schedule);
    const auto trace = forward(emb.hidden, state, ForwardOptions{true, nullptr});
    const RowVec<double> logits = lm_logits(trace.output, {seq.length() - 1}, state).template cast<double>();
    const int next = choose_token(logits, cfg.decode, rng);
    if (next == Vocabulary::kEos || next == Vocabulary::kSom) {
      out.truncated = false;
      break;
    }
    out.token_ids.push_back(next);
    seq.kinds.push_back(ElementKind::text);
    seq.tokens.push_back(next);
    seq.text_targets.push_back(-1);
  }
  out.text = detokenize(out.token_ids, vocab);
  return out;
}

std::vector<bool> parse_mask(const std::string& spec, int n_frames) {
  auto bad = [&]() { fail(ErrorCode::parse_error, "bad mask '" + spec + "': use prefix:K, suffix:K or frames:a-b"); };
  const auto colon = spec.find(':');
  if (colon == std::string::npos) bad();
  const std::string kind = spec.substr(0, colon), arg = spec.substr(colon + 1);
  auto to_int = [&](const std::string& s) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(s, &used);
    } catch (const std::exception&) {
      bad();
    }
    if (used != s.size() || v < 0) bad();
    return v;
  };
  std::vector<bool> known(static_cast<std::size_t>(n_frames), false);
  int lo = 0, hi = -1;
  if (kind == "prefix") {
    hi = to_int(arg) - 1;
  } else if (kind == "suffix") {
    lo = n_frames - to_int(arg);
    hi = n_frames - 1;
  } else if (kind == "frames") {
    const auto dash = arg.find('-');
    if (dash == std::string::npos) bad();
    lo = to_int(arg.substr(0, dash));
    hi = to_int(arg.substr(dash + 1));
    if (hi < lo) bad();
  } else {
    bad();
  }
  require(lo >= 0 && hi < n_frames, ErrorCode::out_of_range,
          "mask '" + spec + "' exceeds the motion length " + std::to_string(n_frames));
  for (int i = lo; i <= hi; ++i) known[static_cast<std::size_t>(i)] = true;
  return known;
}

#define MOMUG_INSTANTIATE(Real)                                                                                  \
  template Mat<double> sample_motion(const std::vector<int>&, int, const ModelState<Real>&, const NoiseSchedule&, \
                                     const Vocabulary&, const SampleConfig&, SampleTrace*);                      \
  template Mat<double> inpaint_motion(const Mat<double>&, const std::vector<bool>&, const std::vector<int>&,      \
                                      const ModelState<Real>&, const NoiseSchedule&, const Vocabulary&,          \
                                      const SampleConfig&, SampleTrace*);                                        \
  template TextSample sample_text(const Mat<double>&, const ModelState<Real>&, const NoiseSchedule&,              \
                                  const Vocabulary&, const SampleConfig&);
MOMUG_INSTANTIATE(float)
MOMUG_INSTANTIATE(double)
#undef MOMUG_INSTANTIATE

}  // namespace momug
