#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "momug/tensor.hpp"

namespace momug {

// N x d_motion continuous pose features, one frame per row.
struct MotionSequence {
  Mat<double> frames;

  int n_frames() const { return static_cast<int>(frames.rows()); }
  int feature_dim() const { return static_cast<int>(frames.cols()); }
};

struct Caption {
  std::string text;
  std::vector<int> token_ids;
};

// Closed word-level vocabulary. Special ids occupy 0..5, words follow densely.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSom = 3;
  static constexpr int kEom = 4;
  static constexpr int kNul = 5;
  static constexpr int kNumSpecial = 6;

  Vocabulary() = default;
  // Builds the vocabulary from words in first-seen order; duplicates ignored.
  explicit Vocabulary(const std::vector<std::string>& words);

  int size() const { return static_cast<int>(tokens_.size()); }
  bool is_special(int id) const { return id >= 0 && id < kNumSpecial; }
  bool contains(std::string_view word) const;
  int id(std::string_view word) const;
  const std::string& token(int id) const;
  // All entries including the special spellings, indexed by id.
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::vector<std::string> words() const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab);
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

struct CorpusStats {
  std::vector<double> mean;
  std::vector<double> std;
  std::map<int, int> length_histogram;

  int feature_dim() const { return static_cast<int>(mean.size()); }
  // Draws a clip length in proportion to the histogram counts.
  int sample_length(Rng& rng) const;
};

enum class MotionFamily : int {
  walk_forward,
  walk_backward,
  turn_left,
  turn_right,
  jump,
  wave,
  walk_circle,
  squat,
};

inline constexpr int kNumFamilies = 8;
inline constexpr int kMinFrames = 16;
inline constexpr int kMaxFrames = 64;
inline constexpr int kMinMotionDim = 4;

std::string_view family_name(MotionFamily family);

struct CorpusPair {
  Caption caption;
  MotionSequence motion;
  MotionFamily family = MotionFamily::walk_forward;
};

// Instruct prompts prepended to every mixed sequence.
inline constexpr std::string_view kTextToMotionPrompt = "Generate a motion for the following caption:";
inline constexpr std::string_view kMotionToTextPrompt = "Describe the following motion:";

// The fixed vocabulary covering every caption the generator can emit plus the prompts.
Vocabulary corpus_vocabulary();

std::vector<CorpusPair> generate_corpus(std::uint64_t seed, int count, int d_motion);

struct NormalizedMotions {
  std::vector<MotionSequence> motions;
  CorpusStats stats;
};

// Z-score per feature over the pooled frames of all motions.
NormalizedMotions normalize(const std::vector<MotionSequence>& motions);
CorpusStats compute_stats(const std::vector<MotionSequence>& motions);
MotionSequence apply_normalization(const MotionSequence& motion, const CorpusStats& stats);
MotionSequence denormalize(const MotionSequence& motion, const CorpusStats& stats);

struct Corpus {
  Vocabulary vocab;
  CorpusStats stats;
  std::vector<CorpusPair> pairs;
  std::uint64_t seed = 0;
  int d_motion = 0;
};

// Generates pairs, the vocabulary and stats over the raw frames.
Corpus build_corpus(std::uint64_t seed, int count, int d_motion);

// JSON-lines: a "stats" record first, then one "pair" record per example (raw frames).
void save_corpus(const Corpus& corpus, const std::string& path);
Corpus load_corpus(const std::string& path);

enum class Split { train, test, all };
Split parse_split(std::string_view name);
// Deterministic tail split: the last round(test_fraction * count) pairs are the test set.
std::vector<CorpusPair> corpus_split(const Corpus& corpus, Split split, double test_fraction = 0.1);

// Normalized copies of the motions (same order), using the corpus stats.
std::vector<CorpusPair> normalized_pairs(const std::vector<CorpusPair>& pairs, const CorpusStats& stats);

}  // namespace momug
