#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "momug/corpus.hpp"
#include "momug/embedder.hpp"
#include "momug/model.hpp"
#include "momug/sampling.hpp"
#include "momug/schedule.hpp"

namespace momug {

// Frechet distance between Gaussians fit to the rows of a and b.
double fid(const Mat<double>& feats_a, const Mat<double>& feats_b, double ridge = 1e-6);

struct RPrecision {
  double top1 = 0.0, top2 = 0.0, top3 = 0.0;
  int n = 0;  // motions scored (partial final group dropped)
};

// Row i of motion_feats matches row i of text_feats. Rows are shuffled into
// groups; within a group each motion ranks all captions by Euclidean distance.
// A caption at exactly the true caption's distance (an identical caption) does
// not outrank it.
RPrecision r_precision(const Mat<double>& motion_feats, const Mat<double>& text_feats, std::uint64_t seed,
                       int group_size = 32);

double mm_dist(const Mat<double>& motion_feats, const Mat<double>& text_feats);

// Mean distance over n_pairs disjoint random row pairs (fewer if rows run out).
double diversity(const Mat<double>& feats, int n_pairs, std::uint64_t seed);

// Mean pairwise distance within each group, averaged over groups with >= 2 rows.
double multimodality(const std::vector<Mat<double>>& groups);

using Words = std::vector<std::string>;
Words split_words(const std::string& text);

// Sentence BLEU-n with uniform weights, clipped counts, brevity penalty against
// the closest reference length, and 1e-9 in place of zero match counts.
double bleu(const Words& candidate, const std::vector<Words>& references, int max_n);
// Corpus BLEU-n: counts and lengths pooled before the precision ratios.
double corpus_bleu(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& references, int max_n);

std::size_t lcs_length(const Words& a, const Words& b);
double rouge_l(const Words& candidate, const Words& reference, double beta_sq = 1.2);

// Per-candidate CIDEr (x10), IDF from the reference sets passed in.
std::vector<double> cider_scores(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& references,
                                 double sigma = 6.0);
double cider(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& references,
             double sigma = 6.0);

struct MetricReport {
  // text-to-motion
  double fid = 0.0;
  double fid_noise = 0.0;  // Gaussian-noise motions vs real, the reference ceiling
  RPrecision r_precision_real, r_precision_gen;
  double mm_dist_real = 0.0, mm_dist_gen = 0.0;
  double diversity_real = 0.0, diversity_gen = 0.0, diversity_gap = 0.0;
  double multimodality = 0.0;
  int n_motion = 0, n_multimodality_captions = 0, multimodality_repeats = 0, diversity_pairs = 0;
  // motion-to-text
  double bleu1 = 0.0, bleu4 = 0.0, rouge_l = 0.0, cider = 0.0;
  int n_captions = 0, n_truncated = 0;
};

struct EvalConfig {
  SampleConfig sample;  // sample.seed is the root for every draw in the evaluation
  bool motions = true;
  bool captions = true;
  int max_examples = 0;             // 0 = whole split
  int multimodality_captions = 10;  // first K captions get `repeats` generations each
  int multimodality_repeats = 10;
  int diversity_pairs = 100;
};

// Generates one motion per caption and one caption per motion over normalized
// pairs, then computes every metric. Motion lengths follow the references.
template <typename Real>
MetricReport evaluate(const ModelState<Real>& state, const NoiseSchedule& schedule, const Vocabulary& vocab,
                      const std::vector<CorpusPair>& normalized, const JointEmbedder& embedder,
                      const EvalConfig& config);

}  // namespace momug
