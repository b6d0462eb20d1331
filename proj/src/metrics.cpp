#include "momug/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <Eigen/Eigenvalues>

#include "momug/error.hpp"

namespace momug {
namespace {

struct Gaussian {
  RowVec<double> mean;
  Mat<double> cov;
};

Gaussian fit_gaussian(const Mat<double>& x, double ridge) {
  Gaussian g;
  g.mean = x.colwise().mean();
  const Mat<double> centered = x.rowwise() - g.mean;
  g.cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  g.cov.diagonal().array() += ridge;
  return g;
}

// Eigen-decomposition of a symmetric matrix with small negative eigenvalues
// clamped; larger ones mean the input was not PSD.
Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> psd_eigen(const Mat<double>& m, const char* what) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  require(es.info() == Eigen::Success, ErrorCode::not_positive_semidefinite,
          std::string("eigendecomposition failed for ") + what);
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  require(es.eigenvalues().minCoeff() > -1e-8 * scale, ErrorCode::not_positive_semidefinite,
          std::string(what) + " has a negative eigenvalue " + std::to_string(es.eigenvalues().minCoeff()));
  return es;
}

using Ngram = std::vector<std::string>;
using NgramCounts = std::map<Ngram, int>;

NgramCounts ngram_counts(const Words& w, int n) {
  NgramCounts c;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= w.size(); ++i)
    ++c[Ngram(w.begin() + static_cast<std::ptrdiff_t>(i), w.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  return c;
}

struct BleuStats {
  std::vector<double> matches, totals;
  double cand_len = 0.0, ref_len = 0.0;
  explicit BleuStats(int n) : matches(static_cast<std::size_t>(n), 0.0), totals(static_cast<std::size_t>(n), 0.0) {}
};

void accumulate_bleu(const Words& cand, const std::vector<Words>& refs, int max_n, BleuStats& s) {
  require(!refs.empty(), ErrorCode::invalid_argument, "bleu needs at least one reference");
  for (int n = 1; n <= max_n; ++n) {
    const auto cc = ngram_counts(cand, n);
    std::map<Ngram, int> max_ref;
    for (const auto& r : refs)
      for (const auto& [g, k] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], k);
    for (const auto& [g, k] : cc) {
      const auto it = max_ref.find(g);
      s.matches[static_cast<std::size_t>(n - 1)] += std::min(k, it == max_ref.end() ? 0 : it->second);
      s.totals[static_cast<std::size_t>(n - 1)] += k;
    }
  }
  // Closest reference length, shorter one on ties.
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t len) { return std::abs(static_cast<long>(len) - static_cast<long>(cand.size())); };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  s.cand_len += static_cast<double>(cand.size());
  s.ref_len += static_cast<double>(best);
}

double bleu_from_stats(const BleuStats& s, int max_n) {
  if (s.cand_len == 0.0) return 0.0;
  constexpr double kEps = 1e-9;
  double log_sum = 0.0;
  for (int n = 0; n < max_n; ++n) {
    const double m = s.matches[static_cast<std::size_t>(n)], t = s.totals[static_cast<std::size_t>(n)];
    const double p = t == 0.0 ? kEps : (m == 0.0 ? kEps : m) / t;
    log_sum += std::log(p) / max_n;
  }
  const double bp = s.cand_len > s.ref_len ? 1.0 : std::exp(1.0 - s.ref_len / s.cand_len);
  return bp * std::exp(log_sum);
}

double distance(const RowVec<double>& a, const RowVec<double>& b) { return (a - b).norm(); }

}  // namespace

double fid(const Mat<double>& a, const Mat<double>& b, double ridge) {
  require(a.cols() == b.cols(), ErrorCode::shape_mismatch, "fid: feature widths differ");
  require(a.rows() > a.cols() && b.rows() > b.cols(), ErrorCode::invalid_argument,
          "fid needs more samples than feature dimensions on both sides");
  require(a.allFinite() && b.allFinite(), ErrorCode::non_finite, "fid: features are not finite");
  const Gaussian ga = fit_gaussian(a, ridge), gb = fit_gaussian(b, ridge);
  const auto ea = psd_eigen(ga.cov, "covariance A");
  const Mat<double> sqrt_a =
      ea.eigenvectors() * ea.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
  const auto em = psd_eigen(sqrt_a * gb.cov * sqrt_a, "covariance product");
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (ga.mean - gb.mean).squaredNorm() + ga.cov.trace() + gb.cov.trace() - 2.0 * tr_sqrt;
  return value;
}

RPrecision r_precision(const Mat<double>& m, const Mat<double>& t, std::uint64_t seed, int group_size) {
  require(m.rows() == t.rows() && m.cols() == t.cols(), ErrorCode::shape_mismatch,
          "r_precision: motion and text features must be paired");
  require(group_size >= 3, ErrorCode::invalid_argument, "r_precision: group size must be >= 3");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(m.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Rng rng(seed, "r_precision");
  std::shuffle(order.begin(), order.end(), rng.engine());
  RPrecision r;
  std::array<int, 3> hits{};
  const std::size_t g = static_cast<std::size_t>(group_size);
  for (std::size_t lo = 0; lo + g <= order.size(); lo += g) {
    for (std::size_t i = lo; i < lo + g; ++i) {
      const double d_true = distance(m.row(order[i]), t.row(order[i]));
      int rank = 1;
      for (std::size_t j = lo; j < lo + g; ++j)
        if (j != i && distance(m.row(order[i]), t.row(order[j])) < d_true) ++rank;
      for (int k = 0; k < 3; ++k)
        if (rank <= k + 1) ++hits[static_cast<std::size_t>(k)];
      ++r.n;
    }
  }
  require(r.n > 0, ErrorCode::invalid_argument, "r_precision needs at least one full group");
  r.top1 = static_cast<double>(hits[0]) / r.n;
  r.top2 = static_cast<double>(hits[1]) / r.n;
  r.top3 = static_cast<double>(hits[2]) / r.n;
  return r;
}

double mm_dist(const Mat<double>& m, const Mat<double>& t) {
  require(m.rows() == t.rows() && m.cols() == t.cols() && m.rows() > 0, ErrorCode::shape_mismatch,
          "mm_dist: motion and text features must be paired");
  double s = 0.0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) s += distance(m.row(i), t.row(i));
  return s / static_cast<double>(m.rows());
}

double diversity(const Mat<double>& feats, int n_pairs, std::uint64_t seed) {
  require(n_pairs >= 1 && feats.rows() >= 2, ErrorCode::invalid_argument, "diversity needs >= 2 rows and pairs");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(feats.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Rng rng(seed, "diversity");
  std::shuffle(order.begin(), order.end(), rng.engine());
  const std::size_t pairs = std::min<std::size_t>(static_cast<std::size_t>(n_pairs), order.size() / 2);
  double s = 0.0;
  for (std::size_t k = 0; k < pairs; ++k) s += distance(feats.row(order[2 * k]), feats.row(order[2 * k + 1]));
  return s / static_cast<double>(pairs);
}

double multimodality(const std::vector<Mat<double>>& groups) {
  double total = 0.0;
  int used = 0;
  for (const auto& g : groups) {
    if (g.rows() < 2) continue;
    double s = 0.0;
    int count = 0;
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      for (Eigen::Index j = i + 1; j < g.rows(); ++j, ++count) s += distance(g.row(i), g.row(j));
    total += s / count;
    ++used;
  }
  require(used > 0, ErrorCode::invalid_argument, "multimodality needs a group with >= 2 generations");
  return total / used;
}

Words split_words(const std::string& text) {
  Words w;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) w.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return w;
}

double bleu(const Words& candidate, const std::vector<Words>& references, int max_n) {
  require(max_n >= 1, ErrorCode::invalid_argument, "bleu order must be >= 1");
  BleuStats s(max_n);
  accumulate_bleu(candidate, references, max_n, s);
  return bleu_from_stats(s, max_n);
}

double corpus_bleu(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& references,
                   int max_n) {
  require(candidates.size() == references.size() && !candidates.empty(), ErrorCode::shape_mismatch,
          "corpus_bleu: one reference set per candidate");
  BleuStats s(max_n);
  for (std::size_t i = 0; i < candidates.size(); ++i) accumulate_bleu(candidates[i], references[i], max_n, s);
  return bleu_from_stats(s, max_n);
}

std::size_t lcs_length(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Words& candidate, const Words& reference, double beta_sq) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  return (1.0 + beta_sq) * p * r / (r + beta_sq * p);
}

std::vector<double> cider_scores(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& references,
                                 double sigma) {
  require(candidates.size() == references.size() && !candidates.empty(), ErrorCode::shape_mismatch,
          "cider: one reference set per candidate");
  constexpr int kMaxN = 4;
  const double n_docs = static_cast<double>(references.size());
  std::array<std::map<Ngram, double>, kMaxN> doc_freq;
  for (const auto& refs : references) {
    for (int n = 1; n <= kMaxN; ++n) {
      std::set<Ngram> seen;
      for (const auto& r : refs)
        for (const auto& kv : ngram_counts(r, n)) seen.insert(kv.first);
      for (const auto& g : seen) doc_freq[static_cast<std::size_t>(n - 1)][g] += 1.0;
    }
  }
  auto tfidf = [&](const Words& w, int n) {
    std::map<Ngram, double> v;
    const auto& df = doc_freq[static_cast<std::size_t>(n - 1)];
    for (const auto& [g, k] : ngram_counts(w, n)) {
      const auto it = df.find(g);
      v[g] = k * std::log(n_docs / std::max(1.0, it == df.end() ? 0.0 : it->second));
    }
    return v;
  };
  auto cosine = [](const std::map<Ngram, double>& a, const std::map<Ngram, double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [g, x] : a) {
      na += x * x;
      const auto it = b.find(g);
      if (it != b.end()) dot += x * it->second;
    }
    for (const auto& kv : b) nb += kv.second * kv.second;
    return na == 0.0 || nb == 0.0 ? 0.0 : dot / std::sqrt(na * nb);
  };

  std::vector<double> scores;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& cand = candidates[i];
    const auto& refs = references[i];
    require(!refs.empty(), ErrorCode::invalid_argument, "cider: empty reference set");
    double total = 0.0;
    for (int n = 1; n <= kMaxN; ++n) {
      const auto vc = tfidf(cand, n);
      double s = 0.0;
      for (const auto& r : refs) {
        const double dl = static_cast<double>(cand.size()) - static_cast<double>(r.size());
        s += std::exp(-dl * dl / (2.0 * sigma * sigma)) * cosine(vc, tfidf(r, n));
      }
      total += s / static_cast<double>(refs.size());
    }
    scores.push_back(10.0 * total / kMaxN);
  }
  return scores;
}

double cider(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& references, double sigma) {
  const auto s = cider_scores(candidates, references, sigma);
  return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

template <typename Real>
MetricReport evaluate(const ModelState<Real>& state, const NoiseSchedule& schedule, const Vocabulary& vocab,
                      const std::vector<CorpusPair>& normalized, const JointEmbedder& embedder,
                      const EvalConfig& config) {
  require(!normalized.empty(), ErrorCode::invalid_argument, "evaluation split is empty");
  const std::size_t n = config.max_examples > 0
                            ? std::min(normalized.size(), static_cast<std::size_t>(config.max_examples))
                            : normalized.size();
  const std::uint64_t root = config.sample.seed;
  MetricReport rep;

  std::vector<Mat<double>> real;
  std::vector<std::vector<int>> captions;
  for (std::size_t i = 0; i < n; ++i) {
    real.push_back(normalized[i].motion.frames);
    captions.push_back(normalized[i].caption.token_ids);
  }

  if (config.motions) {
    auto sample_cfg = [&](const char* label, std::uint64_t counter) {
      SampleConfig c = config.sample;
      c.seed = derive_seed(root, label, counter);
      return c;
    };
    std::vector<Mat<double>> generated, noise;
    Rng noise_rng(root, "eval.noise");
    for (std::size_t i = 0; i < n; ++i) {
      generated.push_back(sample_motion(captions[i], static_cast<int>(real[i].rows()), state, schedule, vocab,
                                        sample_cfg("eval.motion", i)));
      noise.push_back(noise_rng.normal_matrix<double>(real[i].rows(), real[i].cols()));
    }
    const Mat<double> f_real = embedder.embed_motions(real);
    const Mat<double> f_gen = embedder.embed_motions(generated);
    const Mat<double> f_noise = embedder.embed_motions(noise);
    const Mat<double> f_text = embedder.embed_texts(captions);
    rep.n_motion = static_cast<int>(n);
    rep.fid = fid(f_gen, f_real);
    rep.fid_noise = fid(f_noise, f_real);
    const std::uint64_t rp_seed = derive_seed(root, "eval.r_precision", 0);
    rep.r_precision_real = r_precision(f_real, f_text, rp_seed);
    rep.r_precision_gen = r_precision(f_gen, f_text, rp_seed);
    rep.mm_dist_real = mm_dist(f_real, f_text);
    rep.mm_dist_gen = mm_dist(f_gen, f_text);
    const std::uint64_t div_seed = derive_seed(root, "eval.diversity", 0);
    rep.diversity_pairs = std::min(config.diversity_pairs, static_cast<int>(n / 2));
    rep.diversity_real = diversity(f_real, config.diversity_pairs, div_seed);
    rep.diversity_gen = diversity(f_gen, config.diversity_pairs, div_seed);
    rep.diversity_gap = std::abs(rep.diversity_gen - rep.diversity_real);

    const std::size_t mm_k = std::min(n, static_cast<std::size_t>(std::max(0, config.multimodality_captions)));
    if (mm_k > 0 && config.multimodality_repeats >= 2) {
      std::vector<Mat<double>> groups;
      for (std::size_t i = 0; i < mm_k; ++i) {
        std::vector<Mat<double>> reps;
        for (int r = 0; r < config.multimodality_repeats; ++r)
          reps.push_back(sample_motion(captions[i], static_cast<int>(real[i].rows()), state, schedule, vocab,
                                       sample_cfg("eval.multimodality",
                                                  i * static_cast<std::size_t>(config.multimodality_repeats) +
                                                      static_cast<std::size_t>(r))));
        groups.push_back(embedder.embed_motions(reps));
      }
      rep.multimodality = multimodality(groups);
      rep.n_multimodality_captions = static_cast<int>(mm_k);
      rep.multimodality_repeats = config.multimodality_repeats;
    }
  }

  if (config.captions) {
    std::vector<Words> cands;
    std::vector<std::vector<Words>> refs;
    double rouge_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      SampleConfig c = config.sample;
      c.seed = derive_seed(root, "eval.caption", i);
      const auto out = sample_text(real[i], state, schedule, vocab, c);
      rep.n_truncated += out.truncated ? 1 : 0;
      cands.push_back(split_words(out.text));
      refs.push_back({split_words(normalized[i].caption.text)});
      rouge_sum += rouge_l(cands.back(), refs.back().front());
    }
    rep.n_captions = static_cast<int>(n);
    rep.bleu1 = corpus_bleu(cands, refs, 1);
    rep.bleu4 = corpus_bleu(cands, refs, 4);
    rep.rouge_l = rouge_sum / static_cast<double>(n);
    rep.cider = cider(cands, refs);
  }
  return rep;
}

template MetricReport evaluate(const ModelState<float>&, const NoiseSchedule&, const Vocabulary&,
                               const std::vector<CorpusPair>&, const JointEmbedder&, const EvalConfig&);
template MetricReport evaluate(const ModelState<double>&, const NoiseSchedule&, const Vocabulary&,
                               const std::vector<CorpusPair>&, const JointEmbedder&, const EvalConfig&);

}  // namespace momug
