#include <doctest.h>

#include <cmath>

#include "momug/embedder.hpp"
#include "momug/error.hpp"
#include "momug/metrics.hpp"

using namespace momug;

namespace {

JointEmbedder zero_like(const JointEmbedder& e) {
  JointEmbedder z = e;
  for (auto& t : named_tensors(z)) t.tensor->setZero();
  return z;
}

EmbedderConfig small_config(int vocab) {
  EmbedderConfig c;
  c.vocab_size = vocab;
  c.d_emb = 6;
  c.d_text = 5;
  c.hidden = 7;
  c.kernel = 3;
  return c;
}

}  // namespace

TEST_CASE("contrastive gradients match central differences") {
  const Corpus corpus = build_corpus(6, 5, 8);
  const auto pairs = normalized_pairs(corpus.pairs, corpus.stats);
  JointEmbedder e = init_embedder(small_config(corpus.vocab.size()), 3);
  // Non-zero biases so their gradients are exercised away from the origin.
  Rng rng(5, "bias");
  for (auto& t : named_tensors(e))
    if (t.tensor->rows() == 1) *t.tensor = rng.normal_matrix<double>(1, t.tensor->cols()) * 0.1;

  std::vector<Mat<double>> clipped;
  for (const auto& p : pairs) clipped.push_back(p.motion.frames.topRows(9));
  std::vector<const Mat<double>*> motions;
  std::vector<const std::vector<int>*> captions;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    motions.push_back(&clipped[i]);
    captions.push_back(&pairs[i].caption.token_ids);
  }

  JointEmbedder grads = zero_like(e);
  contrastive_loss_and_grads(e, motions, captions, &grads);
  auto params = named_tensors(e);
  auto analytic = named_tensors(grads);
  const double h = 1e-5;
  double worst = 0.0;
  int checked = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Mat<double>& p = *params[k].tensor;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double keep = p.data()[i];
      p.data()[i] = keep + h;
      const double up = contrastive_loss_and_grads(e, motions, captions, nullptr);
      p.data()[i] = keep - h;
      const double down = contrastive_loss_and_grads(e, motions, captions, nullptr);
      p.data()[i] = keep;
      const double num = (up - down) / (2 * h);
      const double a = analytic[k].tensor->data()[i];
      // Token rows absent from the batch have exactly zero gradient both ways.
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6});
      if (rel > worst) worst = rel;
      ++checked;
    }
  }
  INFO("checked " << checked << " scalars");
  CHECK(worst < 1e-5);
}

TEST_CASE("embedding shapes") {
  const Corpus corpus = build_corpus(2, 3, 8);
  const JointEmbedder e = init_embedder(small_config(corpus.vocab.size()), 1);
  const Mat<double> one = Mat<double>::Ones(4, 8);
  const Mat<double> longer = Mat<double>::Ones(12, 8);
  const auto a = e.embed_motion(one), b = e.embed_motion(longer);
  CHECK(a.size() == 6);
  CHECK(a.allFinite());
  CHECK(b.allFinite());
  CHECK(e.embed_text({6, 7, 8}).size() == 6);
}

TEST_CASE("embedder training separates the synthetic families") {
  const Corpus corpus = build_corpus(11, 480, 8);
  const auto all = normalized_pairs(corpus.pairs, corpus.stats);
  const std::vector<CorpusPair> train(all.begin(), all.begin() + 416);
  const std::vector<CorpusPair> test(all.begin() + 416, all.end());
  EmbedderConfig ec;
  ec.vocab_size = corpus.vocab.size();
  EmbedderTrainConfig tc;
  tc.seed = 4;
  tc.max_epochs = 20;
  EmbedderTrainReport report;
  const JointEmbedder e = train_embedder(train, ec, tc, &report);
  CHECK(report.epochs >= tc.min_epochs);
  CHECK(report.val_pairs == 42);

  std::vector<Mat<double>> m;
  std::vector<std::vector<int>> t;
  for (const auto& p : test) {
    m.push_back(p.motion.frames);
    t.push_back(p.caption.token_ids);
  }
  const auto r = r_precision(e.embed_motions(m), e.embed_texts(t), 3);
  // Chance top-3 is 3/32.
  CHECK(r.top3 > 0.5);

  // Same seed, same weights.
  const JointEmbedder again = train_embedder(train, ec, tc);
  CHECK((again.motion_w.array() == e.motion_w.array()).all());
}

TEST_CASE("embedder training rejects a set too small for a held-out group") {
  const Corpus corpus = build_corpus(1, 40, 8);
  EmbedderConfig ec;
  ec.vocab_size = corpus.vocab.size();
  CHECK_THROWS_AS(train_embedder(normalized_pairs(corpus.pairs, corpus.stats), ec, EmbedderTrainConfig{}), Error);
}
