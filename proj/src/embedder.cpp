#include "momug/embedder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "momug/error.hpp"
#include "momug/metrics.hpp"
#include "momug/training.hpp"

namespace momug {
namespace {

Mat<double> im2col(const Mat<double>& x, int kernel) {
  const int pad = kernel / 2;
  const Eigen::Index n = x.rows(), c = x.cols();
  Mat<double> col = Mat<double>::Zero(n, kernel * c);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int o = -pad; o <= pad; ++o) {
      const Eigen::Index src = i + o;
      if (src >= 0 && src < n) col.block(i, (o + pad) * c, 1, c) = x.row(src);
    }
  return col;
}

Mat<double> col2im(const Mat<double>& dcol, Eigen::Index channels, int kernel) {
  const int pad = kernel / 2;
  const Eigen::Index n = dcol.rows();
  Mat<double> dx = Mat<double>::Zero(n, channels);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int o = -pad; o <= pad; ++o) {
      const Eigen::Index dst = i + o;
      if (dst >= 0 && dst < n) dx.row(dst) += dcol.block(i, (o + pad) * channels, 1, channels);
    }
  return dx;
}

Mat<double> gelu_mat(const Mat<double>& x) { return x.unaryExpr([](double v) { return gelu(v); }); }
Mat<double> gelu_grad_mat(const Mat<double>& x) { return x.unaryExpr([](double v) { return gelu_grad(v); }); }

struct MotionTrace {
  Mat<double> col1, pre1, h1, col2, pre2, h2;
  RowVec<double> pooled, out;
};

struct TextTrace {
  RowVec<double> pooled, pre, act, out;
};

MotionTrace motion_forward(const JointEmbedder& e, const Mat<double>& frames) {
  require(frames.rows() >= 1 && frames.cols() == e.config.d_motion, ErrorCode::shape_mismatch,
          "embedder: motion width differs from d_motion");
  MotionTrace t;
  t.col1 = im2col(frames, e.config.kernel);
  t.pre1 = (t.col1 * e.conv1_w.transpose()).rowwise() + RowVec<double>(e.conv1_b);
  t.h1 = gelu_mat(t.pre1);
  t.col2 = im2col(t.h1, e.config.kernel);
  t.pre2 = (t.col2 * e.conv2_w.transpose()).rowwise() + RowVec<double>(e.conv2_b);
  t.h2 = gelu_mat(t.pre2);
  t.pooled = t.h2.colwise().mean();
  t.out = t.pooled * e.motion_w.transpose() + RowVec<double>(e.motion_b);
  return t;
}

TextTrace text_forward(const JointEmbedder& e, const std::vector<int>& ids) {
  require(!ids.empty(), ErrorCode::invalid_argument, "embedder: empty caption");
  TextTrace t;
  t.pooled = RowVec<double>::Zero(e.config.d_text);
  for (int id : ids) {
    require(id >= 0 && id < e.config.vocab_size, ErrorCode::out_of_range, "embedder: token id out of range");
    t.pooled += e.token_embedding.row(id);
  }
  t.pooled /= static_cast<double>(ids.size());
  t.pre = t.pooled * e.text_w1.transpose() + RowVec<double>(e.text_b1);
  t.act = t.pre.unaryExpr([](double v) { return gelu(v); });
  t.out = t.act * e.text_w2.transpose() + RowVec<double>(e.text_b2);
  return t;
}

void motion_backward(const JointEmbedder& e, const MotionTrace& t, const RowVec<double>& d_out, JointEmbedder& g) {
  g.motion_w += d_out.transpose() * t.pooled;
  g.motion_b += d_out;
  const RowVec<double> d_pooled = d_out * e.motion_w;
  const double inv_n = 1.0 / static_cast<double>(t.h2.rows());
  Mat<double> d_h2 = d_pooled.replicate(t.h2.rows(), 1) * inv_n;
  const Mat<double> d_pre2 = d_h2.cwiseProduct(gelu_grad_mat(t.pre2));
  g.conv2_w += d_pre2.transpose() * t.col2;
  g.conv2_b += d_pre2.colwise().sum();
  const Mat<double> d_h1 = col2im(d_pre2 * e.conv2_w, e.config.hidden, e.config.kernel);
  const Mat<double> d_pre1 = d_h1.cwiseProduct(gelu_grad_mat(t.pre1));
  g.conv1_w += d_pre1.transpose() * t.col1;
  g.conv1_b += d_pre1.colwise().sum();
}

void text_backward(const JointEmbedder& e, const TextTrace& t, const std::vector<int>& ids, const RowVec<double>& d_out,
                   JointEmbedder& g) {
  g.text_w2 += d_out.transpose() * t.act;
  g.text_b2 += d_out;
  const RowVec<double> d_pre = (d_out * e.text_w2).cwiseProduct(t.pre.unaryExpr([](double v) { return gelu_grad(v); }));
  g.text_w1 += d_pre.transpose() * t.pooled;
  g.text_b1 += d_pre;
  const RowVec<double> d_pooled = d_pre * e.text_w1 / static_cast<double>(ids.size());
  for (int id : ids) g.token_embedding.row(id) += d_pooled;
}

}  // namespace

void EmbedderConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorCode::config_error, msg); };
  check(vocab_size > 0, "embedder.vocab_size must be positive");
  check(d_motion >= 1, "embedder.d_motion must be positive");
  check(d_emb >= 1 && d_text >= 1 && hidden >= 1, "embedder widths must be positive");
  check(kernel >= 1 && kernel % 2 == 1, "embedder.kernel must be odd");
}

RowVec<double> JointEmbedder::embed_motion(const Mat<double>& frames) const { return motion_forward(*this, frames).out; }
RowVec<double> JointEmbedder::embed_text(const std::vector<int>& ids) const { return text_forward(*this, ids).out; }

Mat<double> JointEmbedder::embed_motions(const std::vector<Mat<double>>& motions) const {
  Mat<double> out(static_cast<Eigen::Index>(motions.size()), config.d_emb);
  for (std::size_t i = 0; i < motions.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = embed_motion(motions[i]);
  return out;
}

Mat<double> JointEmbedder::embed_texts(const std::vector<std::vector<int>>& captions) const {
  Mat<double> out(static_cast<Eigen::Index>(captions.size()), config.d_emb);
  for (std::size_t i = 0; i < captions.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = embed_text(captions[i]);
  return out;
}

std::vector<NamedTensor<double>> named_tensors(JointEmbedder& e) {
  return {{"embedder.conv1_w", &e.conv1_w},     {"embedder.conv1_b", &e.conv1_b},
          {"embedder.conv2_w", &e.conv2_w},     {"embedder.conv2_b", &e.conv2_b},
          {"embedder.motion_w", &e.motion_w},   {"embedder.motion_b", &e.motion_b},
          {"embedder.token_embedding", &e.token_embedding},
          {"embedder.text_w1", &e.text_w1},     {"embedder.text_b1", &e.text_b1},
          {"embedder.text_w2", &e.text_w2},     {"embedder.text_b2", &e.text_b2}};
}

JointEmbedder init_embedder(const EmbedderConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed, "init.embedder");
  auto gauss = [&](int rows, int cols, int fan_in) {
    return Mat<double>(rng.normal_matrix<double>(rows, cols) / std::sqrt(static_cast<double>(fan_in)));
  };
  JointEmbedder e;
  e.config = c;
  e.conv1_w = gauss(c.hidden, c.kernel * c.d_motion, c.kernel * c.d_motion);
  e.conv1_b = Mat<double>::Zero(1, c.hidden);
  e.conv2_w = gauss(c.hidden, c.kernel * c.hidden, c.kernel * c.hidden);
  e.conv2_b = Mat<double>::Zero(1, c.hidden);
  e.motion_w = gauss(c.d_emb, c.hidden, c.hidden);
  e.motion_b = Mat<double>::Zero(1, c.d_emb);
  e.token_embedding = rng.normal_matrix<double>(c.vocab_size, c.d_text);
  e.text_w1 = gauss(c.hidden, c.d_text, c.d_text);
  e.text_b1 = Mat<double>::Zero(1, c.hidden);
  e.text_w2 = gauss(c.d_emb, c.hidden, c.hidden);
  e.text_b2 = Mat<double>::Zero(1, c.d_emb);
  return e;
}

double contrastive_loss_and_grads(const JointEmbedder& e, const std::vector<const Mat<double>*>& motions,
                                  const std::vector<const std::vector<int>*>& captions, JointEmbedder* grads) {
  require(motions.size() == captions.size() && !motions.empty(), ErrorCode::shape_mismatch,
          "contrastive batch needs matched, non-empty motion and caption lists");
  const auto b = static_cast<Eigen::Index>(motions.size());
  std::vector<MotionTrace> mt;
  std::vector<TextTrace> tt;
  Mat<double> m(b, e.config.d_emb), t(b, e.config.d_emb);
  for (Eigen::Index i = 0; i < b; ++i) {
    mt.push_back(motion_forward(e, *motions[static_cast<std::size_t>(i)]));
    tt.push_back(text_forward(e, *captions[static_cast<std::size_t>(i)]));
    m.row(i) = mt.back().out;
    t.row(i) = tt.back().out;
  }
  // logits_ij = -||m_i - t_j||^2
  Mat<double> logits(b, b);
  for (Eigen::Index i = 0; i < b; ++i)
    for (Eigen::Index j = 0; j < b; ++j) logits(i, j) = -(m.row(i) - t.row(j)).squaredNorm();

  auto softmax_rows = [](const Mat<double>& x) {
    Mat<double> p = x;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      p.row(i).array() -= x.row(i).maxCoeff();
      p.row(i) = p.row(i).array().exp().matrix();
      p.row(i) /= p.row(i).sum();
    }
    return p;
  };
  const Mat<double> p_row = softmax_rows(logits);
  const Mat<double> p_col = softmax_rows(logits.transpose()).transpose();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) loss -= 0.5 * (std::log(p_row(i, i)) + std::log(p_col(i, i)));
  loss /= static_cast<double>(b);
  if (!grads) return loss;

  const Mat<double> eye = Mat<double>::Identity(b, b);
  const Mat<double> d_logits = 0.5 * ((p_row - eye) + (p_col - eye)) / static_cast<double>(b);
  Mat<double> dm = Mat<double>::Zero(b, e.config.d_emb), dt = Mat<double>::Zero(b, e.config.d_emb);
  for (Eigen::Index i = 0; i < b; ++i)
    for (Eigen::Index j = 0; j < b; ++j) {
      const RowVec<double> diff = m.row(i) - t.row(j);
      dm.row(i) -= 2.0 * d_logits(i, j) * diff;
      dt.row(j) += 2.0 * d_logits(i, j) * diff;
    }
  for (Eigen::Index i = 0; i < b; ++i) {
    motion_backward(e, mt[static_cast<std::size_t>(i)], dm.row(i), *grads);
    text_backward(e, tt[static_cast<std::size_t>(i)], *captions[static_cast<std::size_t>(i)], dt.row(i), *grads);
  }
  return loss;
}

JointEmbedder train_embedder(const std::vector<CorpusPair>& normalized, const EmbedderConfig& config,
                             const EmbedderTrainConfig& train, EmbedderTrainReport* report,
                             const std::function<void(int, double, double)>& on_epoch) {
  config.validate();
  const auto n_val = static_cast<std::size_t>(std::lround(train.val_fraction * static_cast<double>(normalized.size())));
  require(n_val >= static_cast<std::size_t>(train.batch_size) && normalized.size() > n_val + 1,
          ErrorCode::invalid_argument, "embedder training needs at least one held-out group of batch_size pairs");
  const std::size_t n_train = normalized.size() - n_val;

  JointEmbedder e = init_embedder(config, train.seed);
  TrainConfig opt_cfg;
  opt_cfg.beta2 = 0.999;
  opt_cfg.weight_decay = 0.0;
  AdamW<double> opt(named_tensors(e), opt_cfg);

  std::vector<Mat<double>> val_motions;
  std::vector<std::vector<int>> val_captions;
  for (std::size_t i = n_train; i < normalized.size(); ++i) {
    val_motions.push_back(normalized[i].motion.frames);
    val_captions.push_back(normalized[i].caption.token_ids);
  }

  std::vector<std::size_t> order(n_train);
  EmbedderTrainReport r;
  r.val_pairs = static_cast<int>(n_val);
  for (int epoch = 0; epoch < train.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(train.seed, "embedder.shuffle", static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle.engine());
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t lo = 0; lo + 1 < n_train; lo += static_cast<std::size_t>(train.batch_size)) {
      const std::size_t hi = std::min(n_train, lo + static_cast<std::size_t>(train.batch_size));
      if (hi - lo < 2) break;
      std::vector<const Mat<double>*> ms;
      std::vector<const std::vector<int>*> cs;
      for (std::size_t k = lo; k < hi; ++k) {
        ms.push_back(&normalized[order[k]].motion.frames);
        cs.push_back(&normalized[order[k]].caption.token_ids);
      }
      JointEmbedder g = e;
      for (auto& nt : named_tensors(g)) nt.tensor->setZero();
      loss_sum += contrastive_loss_and_grads(e, ms, cs, &g);
      ++batches;
      opt.step(named_tensors(e), named_tensors(g), train.lr);
    }
    r.epochs = epoch + 1;
    r.final_loss = loss_sum / std::max(1, batches);
    r.val_top1 = r_precision(e.embed_motions(val_motions), e.embed_texts(val_captions),
                             derive_seed(train.seed, "embedder.val", 0), train.batch_size)
                     .top1;
    if (on_epoch) on_epoch(epoch, r.final_loss, r.val_top1);
    if (r.epochs >= train.min_epochs && r.val_top1 > train.target_top1) {
      r.reached_target = true;
      break;
    }
  }
  if (report) *report = r;
  return e;
}

}  // namespace momug
