#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "momug/corpus.hpp"
#include "momug/model.hpp"
#include "momug/schedule.hpp"

namespace momug {

enum class DecodeKind { greedy, temperature, top_k };

struct DecodeConfig {
  DecodeKind kind = DecodeKind::greedy;
  double temperature = 1.0;
  int top_k = 5;
};

// Which x0 predictions drive the reverse chain. conditional_only and
// unconditional_only are debug modes that skip the other forward pass.
enum class Guidance { guided, conditional_only, unconditional_only };

struct SampleConfig {
  double cfg_scale = 2.5;
  int motion_length = 0;  // 0 draws a length from the corpus histogram
  int max_text_len = 32;
  DecodeConfig decode;
  std::uint64_t seed = 0;
  Guidance guidance = Guidance::guided;

  void validate() const;
};

// (1 - s) * uncond + s * cond, so s = 1 and s = 0 reproduce the inputs exactly.
Mat<double> guided_x0(const Mat<double>& cond, const Mat<double>& uncond, double scale);

// Per-step tensors of a reverse chain, index 0 is t = T.
struct SampleTrace {
  std::vector<int> timesteps;
  std::vector<Mat<double>> x_t;
  std::vector<Mat<double>> x0_cond;    // empty when not computed
  std::vector<Mat<double>> x0_uncond;  // empty when not computed
  std::vector<Mat<double>> x0_guided;
};

// Resolves cfg.motion_length, drawing from the histogram when it is 0.
int resolve_motion_length(const SampleConfig& cfg, const CorpusStats& stats);

// Text-to-motion reverse diffusion. Returns x_0 in normalized units.
template <typename Real>
Mat<double> sample_motion(const std::vector<int>& caption_ids, int length, const ModelState<Real>& state,
                          const NoiseSchedule& schedule, const Vocabulary& vocab, const SampleConfig& cfg,
                          SampleTrace* trace = nullptr);

// Replacement inpainting: frames with known[i] set are re-noised from `x0_known`
// to the current level after every reverse step.
template <typename Real>
Mat<double> inpaint_motion(const Mat<double>& x0_known, const std::vector<bool>& known,
                           const std::vector<int>& caption_ids, const ModelState<Real>& state,
                           const NoiseSchedule& schedule, const Vocabulary& vocab, const SampleConfig& cfg,
                           SampleTrace* trace = nullptr);

struct TextSample {
  std::vector<int> token_ids;  // caption tokens, stop token stripped
  std::string text;
  bool truncated = false;  // max_text_len reached with no stop token
};

// Motion-to-text decoding over normalized frames; stops at <eos> or <som>.
template <typename Real>
TextSample sample_text(const Mat<double>& frames, const ModelState<Real>& state, const NoiseSchedule& schedule,
                       const Vocabulary& vocab, const SampleConfig& cfg);

// Picks the next token from one logit row. Special ids other than <eos>/<som> are never chosen.
int choose_token(const RowVec<double>& logits, const DecodeConfig& decode, Rng& rng);

// Inpainting masks: "prefix:K", "suffix:K", "frames:a-b" (inclusive, 0-based).
std::vector<bool> parse_mask(const std::string& spec, int n_frames);

}  // namespace momug
