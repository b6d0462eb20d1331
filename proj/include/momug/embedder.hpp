#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "momug/corpus.hpp"
#include "momug/model.hpp"
#include "momug/tensor.hpp"

namespace momug {

struct EmbedderConfig {
  int vocab_size = 0;
  int d_motion = 8;
  int d_emb = 32;
  int d_text = 32;     // token embedding width
  int hidden = 64;     // conv channels and text MLP width
  int kernel = 5;      // odd, "same" zero padding

  void validate() const;
};

// Contrastive text/motion encoder pair standing in for a pretrained feature extractor.
// Motion: conv1d -> GELU -> conv1d -> GELU -> mean over frames -> linear.
// Text: token embedding mean -> linear -> GELU -> linear.
struct JointEmbedder {
  EmbedderConfig config;
  Mat<double> conv1_w, conv1_b;  // hidden x (kernel*d_motion), 1 x hidden
  Mat<double> conv2_w, conv2_b;  // hidden x (kernel*hidden), 1 x hidden
  Mat<double> motion_w, motion_b;  // d_emb x hidden, 1 x d_emb
  Mat<double> token_embedding;     // V x d_text
  Mat<double> text_w1, text_b1;    // hidden x d_text, 1 x hidden
  Mat<double> text_w2, text_b2;    // d_emb x hidden, 1 x d_emb

  RowVec<double> embed_motion(const Mat<double>& frames) const;
  RowVec<double> embed_text(const std::vector<int>& token_ids) const;
  Mat<double> embed_motions(const std::vector<Mat<double>>& motions) const;
  Mat<double> embed_texts(const std::vector<std::vector<int>>& captions) const;
};

std::vector<NamedTensor<double>> named_tensors(JointEmbedder& e);
JointEmbedder init_embedder(const EmbedderConfig& config, std::uint64_t seed);

// Symmetric InfoNCE over logits -||m_i - t_j||^2 for one batch; accumulates
// gradients into `grads` (same layout as the embedder) and returns the loss.
double contrastive_loss_and_grads(const JointEmbedder& e, const std::vector<const Mat<double>*>& motions,
                                  const std::vector<const std::vector<int>*>& captions, JointEmbedder* grads);

struct EmbedderTrainConfig {
  int batch_size = 32;
  int min_epochs = 5;
  int max_epochs = 60;
  double lr = 1e-3;
  double target_top1 = 0.9;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct EmbedderTrainReport {
  int epochs = 0;
  double final_loss = 0.0;
  double val_top1 = 0.0;
  int val_pairs = 0;
  bool reached_target = false;
};

// Trains on normalized pairs, holding out the tail val_fraction for the
// retrieval check; stops once held-out top-1 at groups of batch_size exceeds the target.
JointEmbedder train_embedder(const std::vector<CorpusPair>& normalized, const EmbedderConfig& config,
                             const EmbedderTrainConfig& train, EmbedderTrainReport* report = nullptr,
                             const std::function<void(int epoch, double loss, double val_top1)>& on_epoch = {});

}  // namespace momug
