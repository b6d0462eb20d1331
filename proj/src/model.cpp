#include "momug/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "momug/corpus.hpp"
#include "momug/error.hpp"

namespace momug {
namespace {

constexpr double kNormEps = 1e-5;

template <typename Real>
using ColVec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

template <typename Real>
Mat<Real> uniform_matrix(Rng& rng, int rows, int cols, double bound) {
  Mat<Real> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>(rng.uniform(-bound, bound));
  return m;
}

template <typename Real>
Mat<Real> gaussian_matrix(Rng& rng, int rows, int cols, double stddev) {
  Mat<Real> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>(stddev * rng.normal());
  return m;
}

template <typename Real>
Mat<Real> rms_norm(const Mat<Real>& x, const Mat<Real>& gain, ColVec<Real>& inv_rms) {
  const auto d = static_cast<Real>(x.cols());
  inv_rms = ((x.array().square().rowwise().sum() / d) + static_cast<Real>(kNormEps)).rsqrt().matrix();
  Mat<Real> out = x.array().colwise() * inv_rms.array();
  out.array().rowwise() *= gain.row(0).array();
  return out;
}

// Accumulates d gain; returns dx.
template <typename Real>
Mat<Real> rms_norm_backward(const Mat<Real>& dy, const Mat<Real>& x, const Mat<Real>& gain,
                            const ColVec<Real>& inv_rms, Mat<Real>* d_gain) {
  const auto d = static_cast<Real>(x.cols());
  Mat<Real> u = dy.array().rowwise() * gain.row(0).array();
  if (d_gain) {
    Mat<Real> xhat = x.array().colwise() * inv_rms.array();
    d_gain->row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  }
  const ColVec<Real> dot = (u.array() * x.array()).rowwise().sum().matrix();
  const ColVec<Real> coef = (dot.array() * inv_rms.array().cube() / d).matrix();
  Mat<Real> dx = u.array().colwise() * inv_rms.array();
  dx.array() -= x.array().colwise() * coef.array();
  return dx;
}

template <typename Real>
Mat<Real> adapted_linear(const Mat<Real>& x, const Mat<Real>& w, const LoraPair<Real>* lora, Real scale,
                         double drop_p, Rng* rng, AdaptedLinearTrace<Real>& tr) {
  Mat<Real> y;
  y.noalias() = x * w.transpose();
  if (!lora) return y;
  if (rng && drop_p > 0.0) {
    const Real keep = static_cast<Real>(1.0 / (1.0 - drop_p));
    tr.mask.resize(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < tr.mask.size(); ++i)
      tr.mask.data()[i] = rng->bernoulli(drop_p) ? Real(0) : keep;
    tr.mid.noalias() = x.cwiseProduct(tr.mask) * lora->a.transpose();
  } else {
    tr.mask.resize(0, 0);
    tr.mid.noalias() = x * lora->a.transpose();
  }
  Mat<Real> delta;
  delta.noalias() = tr.mid * lora->b.transpose();
  y += scale * delta;
  return y;
}

template <typename Real>
Mat<Real> adapted_linear_backward(const Mat<Real>& dy, const Mat<Real>& x, const Mat<Real>& w,
                                  const LoraPair<Real>* lora, Real scale, const AdaptedLinearTrace<Real>& tr,
                                  Mat<Real>* d_w, LoraPair<Real>* d_lora) {
  Mat<Real> dx;
  dx.noalias() = dy * w;
  if (d_w) d_w->noalias() += dy.transpose() * x;
  if (!lora) return dx;
  const bool dropped = tr.mask.size() > 0;
  Mat<Real> d_mid;
  d_mid.noalias() = scale * (dy * lora->b);
  if (d_lora) {
    d_lora->b.noalias() += scale * (dy.transpose() * tr.mid);
    if (dropped) {
      d_lora->a.noalias() += d_mid.transpose() * x.cwiseProduct(tr.mask);
    } else {
      d_lora->a.noalias() += d_mid.transpose() * x;
    }
  }
  Mat<Real> d_in;
  d_in.noalias() = d_mid * lora->a;
  if (dropped) d_in.array() *= tr.mask.array();
  dx += d_in;
  return dx;
}

template <typename Real>
void fill_block_adapters(BlockAdapters<Real>& b, const ModelConfig& c, Rng& rng) {
  const int r = c.lora_rank;
  auto make = [&](int d_in, int d_out) {
    LoraPair<Real> p;
    p.a = gaussian_matrix<Real>(rng, r, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)));
    p.b = Mat<Real>::Zero(d_out, r);
    return p;
  };
  b.q = make(c.d_model, c.d_model);
  b.k = make(c.d_model, c.d_model);
  b.v = make(c.d_model, c.d_model);
  b.o = make(c.d_model, c.d_model);
  b.up = make(c.d_model, c.d_ff);
  b.down = make(c.d_ff, c.d_model);
}

template <typename Real>
void add_pair(std::vector<NamedTensor<Real>>& out, const std::string& prefix, LoraPair<Real>& p) {
  out.push_back({prefix + ".a", &p.a});
  out.push_back({prefix + ".b", &p.b});
}

template <typename Real>
void check_trace(const ModelState<Real>& state, const ForwardTrace<Real>& trace) {
  require(state.config.same_shape(trace.config) &&
              static_cast<int>(trace.blocks.size()) == state.config.n_layers,
          ErrorCode::state_mismatch, "forward trace was produced by a model with a different shape");
}

}  // namespace

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorCode::config_error, msg); };
  check(d_model > 0, "model.d_model must be positive");
  check(n_heads > 0 && d_model % n_heads == 0, "model.d_model must be divisible by model.n_heads");
  check(n_layers >= 1, "model.n_layers must be >= 1");
  check(d_ff > 0, "model.d_ff must be positive");
  check(vocab_size > 0, "model.vocab_size must be positive");
  check(d_motion >= 1, "model.d_motion must be positive");
  check(max_seq_len >= 1, "model.max_seq_len must be positive");
  check(diffusion_steps >= 1, "model.diffusion_steps must be >= 1");
  check(lora_rank >= 1, "model.lora_rank must be >= 1");
  check(lora_alpha > 0.0, "model.lora_alpha must be positive");
  check(lora_dropout >= 0.0 && lora_dropout < 1.0, "model.lora_dropout must be in [0, 1)");
}

bool ModelConfig::same_shape(const ModelConfig& o) const {
  return d_model == o.d_model && n_layers == o.n_layers && n_heads == o.n_heads && d_ff == o.d_ff &&
         vocab_size == o.vocab_size && d_motion == o.d_motion && lora_rank == o.lora_rank;
}

int MixedSequence::time_position() const {
  auto it = std::find(kinds.begin(), kinds.end(), ElementKind::time);
  return it == kinds.end() ? -1 : static_cast<int>(it - kinds.begin());
}

int MixedSequence::motion_begin() const {
  auto it = std::find(kinds.begin(), kinds.end(), ElementKind::motion);
  return it == kinds.end() ? -1 : static_cast<int>(it - kinds.begin());
}

std::vector<int> MixedSequence::target_positions() const {
  std::vector<int> out;
  for (int i = 0; i < length(); ++i)
    if (text_targets[static_cast<std::size_t>(i)] >= 0) out.push_back(i);
  return out;
}

std::vector<int> MixedSequence::target_ids() const {
  std::vector<int> out;
  for (int t : text_targets)
    if (t >= 0) out.push_back(t);
  return out;
}

void MixedSequence::validate(int d_motion) const {
  auto check = [](bool ok, const char* msg) { require(ok, ErrorCode::invalid_argument, msg); };
  const auto n = kinds.size();
  check(tokens.size() == n && text_targets.size() == n, "mixed sequence arrays disagree in length");
  check(std::count(kinds.begin(), kinds.end(), ElementKind::time) == 1, "mixed sequence needs exactly one time slot");
  const int tp = time_position();
  const int mb = motion_begin();
  const int mc = motion_count();
  check(mc >= 1 && mb == tp + 1, "motion frames must directly follow the time slot");
  check(frames.cols() == d_motion, "motion frame width does not match d_motion");
  check(std::count(kinds.begin(), kinds.end(), ElementKind::motion) == mc, "motion frames must be contiguous");
  for (int i = mb; i < mb + mc; ++i)
    check(kinds[static_cast<std::size_t>(i)] == ElementKind::motion, "motion frames must be contiguous");
  check(tp >= 1 && kinds[static_cast<std::size_t>(tp - 1)] == ElementKind::text &&
            tokens[static_cast<std::size_t>(tp - 1)] == Vocabulary::kSom,
        "time slot must follow <som>");
  check(mb + mc < length() && tokens[static_cast<std::size_t>(mb + mc)] == Vocabulary::kEom, "motion span must end with <eom>");
  check(std::count(tokens.begin(), tokens.end(), Vocabulary::kSom) == 1 && std::count(tokens.begin(), tokens.end(), Vocabulary::kEom) == 1,
        "exactly one <som> and one <eom> expected");
  check(mode == TaskMode::text_to_motion || timestep == 0, "motion-to-text sequences carry t = 0");
  for (std::size_t i = 0; i < n; ++i) {
    const bool is_text = kinds[i] == ElementKind::text;
    check(is_text == (tokens[i] >= 0), "token ids must be set exactly at text positions");
    check(kinds[i] != ElementKind::motion || text_targets[i] < 0, "text targets and motion positions overlap");
  }
}

// ---------------------------------------------------------------------------

template <typename Real>
std::vector<NamedTensor<Real>> named_tensors(BaseWeights<Real>& w) {
  std::vector<NamedTensor<Real>> out;
  out.push_back({"base.token_embedding", &w.token_embedding});
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    auto& b = w.blocks[l];
    const std::string p = "base.block" + std::to_string(l);
    out.push_back({p + ".attn_norm", &b.attn_norm});
    out.push_back({p + ".wq", &b.wq});
    out.push_back({p + ".wk", &b.wk});
    out.push_back({p + ".wv", &b.wv});
    out.push_back({p + ".wo", &b.wo});
    out.push_back({p + ".ffn_norm", &b.ffn_norm});
    out.push_back({p + ".w_up", &b.w_up});
    out.push_back({p + ".w_down", &b.w_down});
  }
  out.push_back({"base.final_norm", &w.final_norm});
  out.push_back({"base.lm_head", &w.lm_head});
  return out;
}

template <typename Real>
std::vector<NamedTensor<Real>> named_tensors(AdapterWeights<Real>& w) {
  std::vector<NamedTensor<Real>> out;
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    auto& b = w.blocks[l];
    const std::string p = "adapter.block" + std::to_string(l);
    add_pair(out, p + ".q", b.q);
    add_pair(out, p + ".k", b.k);
    add_pair(out, p + ".v", b.v);
    add_pair(out, p + ".o", b.o);
    add_pair(out, p + ".up", b.up);
    add_pair(out, p + ".down", b.down);
  }
  out.push_back({"adapter.time_w1", &w.time_w1});
  out.push_back({"adapter.time_b1", &w.time_b1});
  out.push_back({"adapter.time_w2", &w.time_w2});
  out.push_back({"adapter.time_b2", &w.time_b2});
  out.push_back({"adapter.motion_in", &w.motion_in});
  out.push_back({"adapter.motion_out", &w.motion_out});
  return out;
}

template <typename Real>
BaseWeights<Real> zeros_like(const BaseWeights<Real>& w) {
  BaseWeights<Real> z = w;
  for (auto& t : named_tensors(z)) t.tensor->setZero();
  return z;
}

template <typename Real>
AdapterWeights<Real> zeros_like(const AdapterWeights<Real>& w) {
  AdapterWeights<Real> z = w;
  for (auto& t : named_tensors(z)) t.tensor->setZero();
  return z;
}

template <typename Real>
std::uint64_t base_fingerprint(const BaseWeights<Real>& w) {
  Fnv1a h;
  for (auto& t : named_tensors(const_cast<BaseWeights<Real>&>(w))) h.update(*t.tensor);
  return h.value();
}

template <typename To, typename From>
ModelState<To> convert_state(const ModelState<From>& state) {
  ModelState<From>& src = const_cast<ModelState<From>&>(state);
  ModelState<To> out;
  out.config = state.config;
  out.base.blocks.resize(state.base.blocks.size());
  out.adapters.blocks.resize(state.adapters.blocks.size());
  auto copy = [](auto from, auto to) {
    for (std::size_t i = 0; i < from.size(); ++i) *to[i].tensor = from[i].tensor->template cast<To>();
  };
  copy(named_tensors(src.base), named_tensors(out.base));
  copy(named_tensors(src.adapters), named_tensors(out.adapters));
  return out;
}

template <typename Real>
BaseWeights<Real> init_base(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed, "init.base");
  const double lin = 1.0 / std::sqrt(static_cast<double>(c.d_model));
  const double lin_ff = 1.0 / std::sqrt(static_cast<double>(c.d_ff));
  BaseWeights<Real> w;
  w.token_embedding = uniform_matrix<Real>(rng, c.vocab_size, c.d_model, 1.0);
  for (int l = 0; l < c.n_layers; ++l) {
    BlockWeights<Real> b;
    b.attn_norm = Mat<Real>::Ones(1, c.d_model);
    b.wq = uniform_matrix<Real>(rng, c.d_model, c.d_model, lin);
    b.wk = uniform_matrix<Real>(rng, c.d_model, c.d_model, lin);
    b.wv = uniform_matrix<Real>(rng, c.d_model, c.d_model, lin);
    b.wo = uniform_matrix<Real>(rng, c.d_model, c.d_model, lin / std::sqrt(2.0 * c.n_layers));
    b.ffn_norm = Mat<Real>::Ones(1, c.d_model);
    b.w_up = uniform_matrix<Real>(rng, c.d_ff, c.d_model, lin);
    b.w_down = uniform_matrix<Real>(rng, c.d_model, c.d_ff, lin_ff / std::sqrt(2.0 * c.n_layers));
    w.blocks.push_back(std::move(b));
  }
  w.final_norm = Mat<Real>::Ones(1, c.d_model);
  w.lm_head = uniform_matrix<Real>(rng, c.vocab_size, c.d_model, lin);
  return w;
}

template <typename Real>
AdapterWeights<Real> init_adapters(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed, "init.adapters");
  const double lin = 1.0 / std::sqrt(static_cast<double>(c.d_model));
  AdapterWeights<Real> w;
  w.blocks.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& b : w.blocks) fill_block_adapters(b, c, rng);
  w.time_w1 = gaussian_matrix<Real>(rng, c.d_model, c.d_model, lin);
  w.time_b1 = Mat<Real>::Zero(1, c.d_model);
  w.time_w2 = gaussian_matrix<Real>(rng, c.d_model, c.d_model, lin);
  w.time_b2 = Mat<Real>::Zero(1, c.d_model);
  w.motion_in = gaussian_matrix<Real>(rng, c.d_model, c.d_motion, 1.0 / std::sqrt(static_cast<double>(c.d_motion)));
  w.motion_out = gaussian_matrix<Real>(rng, c.d_motion, c.d_model, 0.1 * lin);
  return w;
}

template <typename Real>
ModelState<Real> init_state(const ModelConfig& config, std::uint64_t seed) {
  ModelState<Real> s;
  s.config = config;
  s.base = init_base<Real>(config, seed);
  s.adapters = init_adapters<Real>(config, seed);
  return s;
}

// ---------------------------------------------------------------------------

template <typename Real>
Embedded<Real> embed_tokens(const std::vector<int>& tokens, const ModelState<Real>& state) {
  const auto& c = state.config;
  const int n = static_cast<int>(tokens.size());
  require(n >= 1, ErrorCode::invalid_argument, "cannot embed an empty sequence");
  require(n <= c.max_seq_len, ErrorCode::out_of_range,
          "sequence length " + std::to_string(n) + " exceeds max_seq_len " + std::to_string(c.max_seq_len));
  Embedded<Real> e;
  e.hidden.resize(n, c.d_model);
  e.trace.tokens = tokens;
  for (int i = 0; i < n; ++i) {
    const int id = tokens[static_cast<std::size_t>(i)];
    require(id >= 0 && id < c.vocab_size, ErrorCode::out_of_range, "token id out of range");
    e.hidden.row(i) = state.base.token_embedding.row(id) + sinusoidal_encoding<Real>(i, c.d_model);
  }
  return e;
}

template <typename Real>
Embedded<Real> embed_mixed(const MixedSequence& seq, const ModelState<Real>& state, const NoiseSchedule& schedule,
                           const Mat<Real>* eps) {
  const auto& c = state.config;
  const auto& a = state.adapters;
  const int n = seq.length();
  require(n <= c.max_seq_len, ErrorCode::out_of_range,
          "sequence length " + std::to_string(n) + " exceeds max_seq_len " + std::to_string(c.max_seq_len));
  seq.validate(c.d_motion);
  require(seq.timestep >= 0 && seq.timestep <= schedule.steps, ErrorCode::out_of_range, "time slot outside schedule");

  Embedded<Real> e;
  auto& tr = e.trace;
  e.hidden.resize(n, c.d_model);
  tr.tokens = seq.tokens;
  tr.time_position = seq.time_position();
  tr.motion_begin = seq.motion_begin();

  const Mat<Real> frames = seq.frames.template cast<Real>();
  if (eps) {
    require(eps->rows() == frames.rows() && eps->cols() == frames.cols(), ErrorCode::shape_mismatch,
            "eps shape does not match motion frames");
    tr.motion_input = q_sample_any(frames, seq.timestep, *eps, schedule);
  } else {
    tr.motion_input = frames;
  }

  tr.time_encoding = sinusoidal_encoding<Real>(seq.timestep, c.d_model);
  tr.time_pre = tr.time_encoding * a.time_w1.transpose() + a.time_b1;
  tr.time_act = tr.time_pre.unaryExpr([](Real x) { return gelu(x); });
  const RowVec<Real> time_embedding = tr.time_act * a.time_w2.transpose() + a.time_b2;

  Mat<Real> motion_embedding;
  motion_embedding.noalias() = tr.motion_input * a.motion_in.transpose();

  for (int i = 0; i < n; ++i) {
    switch (seq.kinds[static_cast<std::size_t>(i)]) {
      case ElementKind::text: {
        const int id = seq.tokens[static_cast<std::size_t>(i)];
        require(id >= 0 && id < c.vocab_size, ErrorCode::out_of_range, "token id out of range");
        e.hidden.row(i) = state.base.token_embedding.row(id);
        break;
      }
      case ElementKind::time: e.hidden.row(i) = time_embedding; break;
      case ElementKind::motion: e.hidden.row(i) = motion_embedding.row(i - tr.motion_begin); break;
    }
    e.hidden.row(i) += sinusoidal_encoding<Real>(i, c.d_model);
  }
  return e;
}

template <typename Real>
ForwardTrace<Real> forward(const Mat<Real>& hidden, const ModelState<Real>& state, const ForwardOptions& options) {
  const auto& c = state.config;
  require(hidden.cols() == c.d_model, ErrorCode::shape_mismatch, "hidden width does not match d_model");
  const int n = static_cast<int>(hidden.rows());
  const int dh = c.head_dim();
  const Real inv_sqrt = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh)));
  const Real scale = static_cast<Real>(c.lora_scale());
  const bool use_lora = options.use_adapters;

  ForwardTrace<Real> trace;
  trace.config = c;
  trace.adapters_used = use_lora;
  trace.blocks.resize(static_cast<std::size_t>(c.n_layers));

  Mat<Real> x = hidden;
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& w = state.base.blocks[static_cast<std::size_t>(l)];
    const BlockAdapters<Real>* ad = use_lora ? &state.adapters.blocks[static_cast<std::size_t>(l)] : nullptr;
    auto& bt = trace.blocks[static_cast<std::size_t>(l)];
    bt.x = x;
    bt.n1 = rms_norm(x, w.attn_norm, bt.inv_rms1);
    bt.q = adapted_linear(bt.n1, w.wq, ad ? &ad->q : nullptr, scale, c.lora_dropout, options.dropout_rng, bt.lq);
    bt.k = adapted_linear(bt.n1, w.wk, ad ? &ad->k : nullptr, scale, c.lora_dropout, options.dropout_rng, bt.lk);
    bt.v = adapted_linear(bt.n1, w.wv, ad ? &ad->v : nullptr, scale, c.lora_dropout, options.dropout_rng, bt.lv);

    bt.ctx.resize(n, c.d_model);
    bt.probs.resize(static_cast<std::size_t>(c.n_heads));
    for (int h = 0; h < c.n_heads; ++h) {
      Mat<Real> s;
      s.noalias() = bt.q.middleCols(h * dh, dh) * bt.k.middleCols(h * dh, dh).transpose();
      s *= inv_sqrt;
      for (int i = 0; i < n; ++i) {
        const Real row_max = s.row(i).head(i + 1).maxCoeff();
        Real total = 0;
        for (int j = 0; j <= i; ++j) {
          const Real e = std::exp(s(i, j) - row_max);
          s(i, j) = e;
          total += e;
        }
        s.row(i).head(i + 1) /= total;
        if (i + 1 < n) s.row(i).tail(n - i - 1).setZero();
      }
      bt.ctx.middleCols(h * dh, dh).noalias() = s * bt.v.middleCols(h * dh, dh);
      bt.probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    Mat<Real> attn = adapted_linear(bt.ctx, w.wo, ad ? &ad->o : nullptr, scale, c.lora_dropout,
                                    options.dropout_rng, bt.lo);
    bt.h = x + attn;
    bt.n2 = rms_norm(bt.h, w.ffn_norm, bt.inv_rms2);
    bt.up = adapted_linear(bt.n2, w.w_up, ad ? &ad->up : nullptr, scale, c.lora_dropout, options.dropout_rng,
                           bt.lup);
    bt.act = bt.up.unaryExpr([](Real v) { return gelu(v); });
    Mat<Real> down = adapted_linear(bt.act, w.w_down, ad ? &ad->down : nullptr, scale, c.lora_dropout,
                                    options.dropout_rng, bt.ldown);
    x = bt.h + down;
  }
  trace.final_in = x;
  trace.output = rms_norm(x, state.base.final_norm, trace.inv_rms_final);
  return trace;
}

template <typename Real>
Mat<Real> lm_logits(const Mat<Real>& output, const std::vector<int>& positions, const ModelState<Real>& state) {
  Mat<Real> rows(static_cast<Eigen::Index>(positions.size()), output.cols());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    require(positions[i] >= 0 && positions[i] < output.rows(), ErrorCode::out_of_range, "logit position out of range");
    rows.row(static_cast<Eigen::Index>(i)) = output.row(positions[i]);
  }
  Mat<Real> logits;
  logits.noalias() = rows * state.base.lm_head.transpose();
  return logits;
}

template <typename Real>
Mat<Real> motion_out(const Mat<Real>& output, int motion_begin, int motion_count, const ModelState<Real>& state) {
  require(motion_begin >= 0 && motion_count >= 0 && motion_begin + motion_count <= output.rows(),
          ErrorCode::out_of_range, "motion span out of range");
  Mat<Real> pred;
  pred.noalias() = output.middleRows(motion_begin, motion_count) * state.adapters.motion_out.transpose();
  return pred;
}

template <typename Real>
Gradients<Real> zero_gradients(const ModelState<Real>& state, bool with_base) {
  Gradients<Real> g;
  g.adapters = zeros_like(state.adapters);
  if (with_base) g.base = zeros_like(state.base);
  return g;
}

template <typename Real>
void backward(const ModelState<Real>& state, const EmbedTrace<Real>& embed, const ForwardTrace<Real>& trace,
              const HeadGradients<Real>& heads, Gradients<Real>& grads) {
  check_trace(state, trace);
  const auto& c = state.config;
  const int n = static_cast<int>(trace.output.rows());
  const int dh = c.head_dim();
  const Real inv_sqrt = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh)));
  const Real scale = static_cast<Real>(c.lora_scale());
  BaseWeights<Real>* gb = grads.base ? &*grads.base : nullptr;
  AdapterWeights<Real>& ga = grads.adapters;
  require(static_cast<int>(embed.tokens.size()) == n, ErrorCode::state_mismatch,
          "embed trace and forward trace disagree in length");

  // Heads.
  Mat<Real> d_out = Mat<Real>::Zero(n, c.d_model);
  require(heads.d_logits.rows() == static_cast<Eigen::Index>(heads.text_positions.size()), ErrorCode::shape_mismatch,
          "d_logits rows must match text positions");
  if (!heads.text_positions.empty()) {
    require(heads.d_logits.cols() == c.vocab_size, ErrorCode::shape_mismatch, "d_logits width must be vocab_size");
    for (std::size_t i = 0; i < heads.text_positions.size(); ++i) {
      const int p = heads.text_positions[i];
      d_out.row(p).noalias() += heads.d_logits.row(static_cast<Eigen::Index>(i)) * state.base.lm_head;
      if (gb)
        gb->lm_head.noalias() +=
            heads.d_logits.row(static_cast<Eigen::Index>(i)).transpose() * trace.output.row(p);
    }
  }
  if (heads.d_motion.size() > 0) {
    const int mb = embed.motion_begin;
    const auto mc = heads.d_motion.rows();
    require(mb >= 0 && mc == embed.motion_input.rows() && heads.d_motion.cols() == c.d_motion,
            ErrorCode::shape_mismatch, "d_motion does not match the motion span");
    d_out.middleRows(mb, mc).noalias() += heads.d_motion * state.adapters.motion_out;
    ga.motion_out.noalias() += heads.d_motion.transpose() * trace.output.middleRows(mb, mc);
  }

  Mat<Real> dx = rms_norm_backward(d_out, trace.final_in, state.base.final_norm, trace.inv_rms_final,
                                   gb ? &gb->final_norm : nullptr);

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& w = state.base.blocks[static_cast<std::size_t>(l)];
    const BlockAdapters<Real>* ad = trace.adapters_used ? &state.adapters.blocks[static_cast<std::size_t>(l)] : nullptr;
    BlockAdapters<Real>* gad = trace.adapters_used ? &ga.blocks[static_cast<std::size_t>(l)] : nullptr;
    BlockWeights<Real>* gw = gb ? &gb->blocks[static_cast<std::size_t>(l)] : nullptr;
    const auto& bt = trace.blocks[static_cast<std::size_t>(l)];

    // Feed-forward branch.
    Mat<Real> d_act = adapted_linear_backward(dx, bt.act, w.w_down, ad ? &ad->down : nullptr, scale, bt.ldown,
                                              gw ? &gw->w_down : nullptr, gad ? &gad->down : nullptr);
    Mat<Real> d_up = d_act.cwiseProduct(bt.up.unaryExpr([](Real v) { return gelu_grad(v); }));
    Mat<Real> d_n2 = adapted_linear_backward(d_up, bt.n2, w.w_up, ad ? &ad->up : nullptr, scale, bt.lup,
                                             gw ? &gw->w_up : nullptr, gad ? &gad->up : nullptr);
    Mat<Real> d_h = dx + rms_norm_backward(d_n2, bt.h, w.ffn_norm, bt.inv_rms2, gw ? &gw->ffn_norm : nullptr);

    // Attention branch.
    Mat<Real> d_ctx = adapted_linear_backward(d_h, bt.ctx, w.wo, ad ? &ad->o : nullptr, scale, bt.lo,
                                              gw ? &gw->wo : nullptr, gad ? &gad->o : nullptr);
    Mat<Real> d_q(n, c.d_model), d_k(n, c.d_model), d_v(n, c.d_model);
    for (int h = 0; h < c.n_heads; ++h) {
      const auto& p = bt.probs[static_cast<std::size_t>(h)];
      const auto dc = d_ctx.middleCols(h * dh, dh);
      Mat<Real> d_p;
      d_p.noalias() = dc * bt.v.middleCols(h * dh, dh).transpose();
      d_v.middleCols(h * dh, dh).noalias() = p.transpose() * dc;
      const ColVec<Real> row_dot = (d_p.array() * p.array()).rowwise().sum().matrix();
      Mat<Real> d_s = p.array() * (d_p.array().colwise() - row_dot.array());
      d_s *= inv_sqrt;
      d_q.middleCols(h * dh, dh).noalias() = d_s * bt.k.middleCols(h * dh, dh);
      d_k.middleCols(h * dh, dh).noalias() = d_s.transpose() * bt.q.middleCols(h * dh, dh);
    }
    Mat<Real> d_n1 = adapted_linear_backward(d_q, bt.n1, w.wq, ad ? &ad->q : nullptr, scale, bt.lq,
                                             gw ? &gw->wq : nullptr, gad ? &gad->q : nullptr);
    d_n1 += adapted_linear_backward(d_k, bt.n1, w.wk, ad ? &ad->k : nullptr, scale, bt.lk, gw ? &gw->wk : nullptr,
                                    gad ? &gad->k : nullptr);
    d_n1 += adapted_linear_backward(d_v, bt.n1, w.wv, ad ? &ad->v : nullptr, scale, bt.lv, gw ? &gw->wv : nullptr,
                                    gad ? &gad->v : nullptr);
    dx = d_h + rms_norm_backward(d_n1, bt.x, w.attn_norm, bt.inv_rms1, gw ? &gw->attn_norm : nullptr);
  }

  // Embedding layer.
  for (int i = 0; i < n; ++i) {
    const int id = embed.tokens[static_cast<std::size_t>(i)];
    if (id >= 0 && gb) gb->token_embedding.row(id) += dx.row(i);
  }
  if (embed.time_position >= 0) {
    const RowVec<Real> d_time = dx.row(embed.time_position);
    ga.time_w2.noalias() += d_time.transpose() * embed.time_act;
    ga.time_b2 += d_time;
    RowVec<Real> d_pre = d_time * state.adapters.time_w2;
    for (Eigen::Index j = 0; j < d_pre.size(); ++j) d_pre(j) *= gelu_grad(embed.time_pre(j));
    ga.time_w1.noalias() += d_pre.transpose() * embed.time_encoding;
    ga.time_b1 += d_pre;
  }
  if (embed.motion_begin >= 0 && embed.motion_input.rows() > 0) {
    ga.motion_in.noalias() += dx.middleRows(embed.motion_begin, embed.motion_input.rows()).transpose() *
                              embed.motion_input;
  }
}

template <typename Real>
const Mat<Real>& attention_probs(const ForwardTrace<Real>& trace, int layer, int head) {
  return trace.blocks.at(static_cast<std::size_t>(layer)).probs.at(static_cast<std::size_t>(head));
}

#define MOMUG_INSTANTIATE(Real)                                                                                \
  template std::vector<NamedTensor<Real>> named_tensors(BaseWeights<Real>&);                                   \
  template std::vector<NamedTensor<Real>> named_tensors(AdapterWeights<Real>&);                                \
  template BaseWeights<Real> zeros_like(const BaseWeights<Real>&);                                             \
  template AdapterWeights<Real> zeros_like(const AdapterWeights<Real>&);                                       \
  template std::uint64_t base_fingerprint(const BaseWeights<Real>&);                                           \
  template BaseWeights<Real> init_base<Real>(const ModelConfig&, std::uint64_t);                               \
  template AdapterWeights<Real> init_adapters<Real>(const ModelConfig&, std::uint64_t);                        \
  template ModelState<Real> init_state<Real>(const ModelConfig&, std::uint64_t);                               \
  template Embedded<Real> embed_tokens(const std::vector<int>&, const ModelState<Real>&);                      \
  template Embedded<Real> embed_mixed(const MixedSequence&, const ModelState<Real>&, const NoiseSchedule&,     \
                                      const Mat<Real>*);                                                       \
  template ForwardTrace<Real> forward(const Mat<Real>&, const ModelState<Real>&, const ForwardOptions&);      \
  template Mat<Real> lm_logits(const Mat<Real>&, const std::vector<int>&, const ModelState<Real>&);           \
  template Mat<Real> motion_out(const Mat<Real>&, int, int, const ModelState<Real>&);                          \
  template Gradients<Real> zero_gradients(const ModelState<Real>&, bool);                                      \
  template void backward(const ModelState<Real>&, const EmbedTrace<Real>&, const ForwardTrace<Real>&,         \
                         const HeadGradients<Real>&, Gradients<Real>&);                                        \
  template const Mat<Real>& attention_probs(const ForwardTrace<Real>&, int, int);
MOMUG_INSTANTIATE(float)
MOMUG_INSTANTIATE(double)
#undef MOMUG_INSTANTIATE

template ModelState<float> convert_state<float, double>(const ModelState<double>&);
template ModelState<double> convert_state<double, float>(const ModelState<float>&);
template ModelState<float> convert_state<float, float>(const ModelState<float>&);
template ModelState<double> convert_state<double, double>(const ModelState<double>&);

}  // namespace momug
