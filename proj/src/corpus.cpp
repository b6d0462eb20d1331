#include "momug/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "momug/error.hpp"

namespace momug {
namespace {

using nlohmann::json;

struct Subject {
  std::string_view words;
  double height;
};
struct Tempo {
  std::string_view word;
  double period;  // frames per cycle
};
struct Size {
  std::string_view word;
  double amp_lo, amp_hi;
};

constexpr std::array<Subject, 5> kSubjects{{
    {"a child", 0.6}, {"a woman", 0.8}, {"a person", 1.0}, {"a man", 1.2}, {"a tall man", 1.4}}};
constexpr std::array<Tempo, 3> kTempos{{{"slowly", 24.0}, {"steadily", 16.0}, {"quickly", 10.0}}};
constexpr std::array<Size, 2> kSizes{{{"small", 0.5, 0.65}, {"big", 1.1, 1.3}}};

constexpr std::array<std::string_view, kNumFamilies> kFamilyNames{
    "walk_forward", "walk_backward", "turn_left", "turn_right", "jump", "wave", "walk_circle", "squat"};
constexpr std::array<std::string_view, kNumFamilies> kFamilyPhrases{
    "walks forward", "walks backward", "turns left", "turns right",
    "jumps up and down", "waves the right hand", "walks in a circle", "squats down"};

constexpr double kFrameNoise = 0.02;

struct ClipParams {
  MotionFamily family;
  double height;
  double period;
  double amp;
  double phase0;
};

// Eight kinematic channels: forward velocity, lateral sway, root height, yaw rate,
// left/right arm swing, left/right leg swing.
std::array<double, 8> family_channels(const ClipParams& p, int frame) {
  const double phi = 2.0 * kPi * frame / p.period + p.phase0;
  const double a = p.amp;
  const double v = a * 16.0 / p.period;
  const double s = std::sin(phi);
  std::array<double, 8> c{};
  c[2] = p.height;
  switch (p.family) {
    case MotionFamily::walk_forward:
    case MotionFamily::walk_circle:
      c[0] = v;
      c[1] = 0.1 * a * s;
      c[2] += 0.05 * a * std::cos(2.0 * phi);
      c[3] = p.family == MotionFamily::walk_circle ? 0.8 * v : 0.0;
      c[4] = 0.5 * a * s;
      c[5] = -0.5 * a * s;
      c[6] = -a * s;
      c[7] = a * s;
      break;
    case MotionFamily::walk_backward:
      c[0] = -v;
      c[1] = 0.1 * a * s;
      c[2] += 0.05 * a * std::cos(2.0 * phi);
      c[4] = 0.3 * a * s;
      c[5] = -0.3 * a * s;
      c[6] = a * s;
      c[7] = -a * s;
      break;
    case MotionFamily::turn_left:
    case MotionFamily::turn_right:
      c[0] = 0.1 * v;
      c[3] = p.family == MotionFamily::turn_left ? 0.8 * v : -0.8 * v;
      c[4] = 0.2 * a * s;
      c[5] = -0.2 * a * s;
      c[6] = -0.4 * a * s;
      c[7] = 0.4 * a * s;
      break;
    case MotionFamily::jump: {
      const double lift = std::max(0.0, s);
      c[2] += a * lift;
      c[4] = c[5] = 0.8 * a * lift;
      c[6] = c[7] = -0.6 * a * std::abs(std::cos(phi));
      break;
    }
    case MotionFamily::wave:
      c[1] = 0.05 * a * s;
      c[5] = 0.8 + a * s;
      break;
    case MotionFamily::squat: {
      const double depth = 0.5 * (1.0 - std::cos(phi));
      c[2] -= 0.5 * a * depth;
      c[4] = c[5] = 0.3 * a * depth;
      c[6] = c[7] = 0.8 * a * depth;
      break;
    }
  }
  return c;
}

MotionSequence render_clip(const ClipParams& p, int n_frames, int d_motion, Rng& rng) {
  MotionSequence m;
  m.frames = Mat<double>::Zero(n_frames, d_motion);
  for (int i = 0; i < n_frames; ++i) {
    const auto c = family_channels(p, i);
    for (int k = 0; k < 8; ++k) m.frames(i, k % d_motion) += c[static_cast<std::size_t>(k)];
    const double phi = 2.0 * kPi * i / p.period + p.phase0;
    for (int k = 8; k < d_motion; ++k) m.frames(i, k) += 0.25 * p.amp * std::sin(0.5 * (k - 6) * phi + k);
    for (int k = 0; k < d_motion; ++k) m.frames(i, k) += kFrameNoise * rng.normal();
  }
  return m;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  if (text.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = text.find(' ', start);
    out.emplace_back(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

json stats_to_json(const Corpus& c) {
  json hist = json::object();
  for (const auto& [len, n] : c.stats.length_histogram) hist[std::to_string(len)] = n;
  return json{{"type", "stats"},
              {"seed", c.seed},
              {"count", c.pairs.size()},
              {"d_motion", c.d_motion},
              {"mean", c.stats.mean},
              {"std", c.stats.std},
              {"length_histogram", hist},
              {"vocab", c.vocab.tokens()}};
}

}  // namespace

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  static const std::array<std::string, kNumSpecial> specials{"<pad>", "<bos>", "<eos>",
                                                              "<som>", "<eom>", "<nul>"};
  for (const auto& s : specials) {
    index_.emplace(s, static_cast<int>(tokens_.size()));
    tokens_.push_back(s);
  }
  for (const auto& w : words) {
    require(!w.empty() && w.find(' ') == std::string::npos, ErrorCode::invalid_argument,
            "vocabulary word must be non-empty without spaces: '" + w + "'");
    if (index_.contains(w)) {
      require(!is_special(index_.at(w)), ErrorCode::invalid_argument,
              "vocabulary word collides with special token: " + w);
      continue;
    }
    index_.emplace(w, static_cast<int>(tokens_.size()));
    tokens_.push_back(w);
  }
}

bool Vocabulary::contains(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it != index_.end() && !is_special(it->second);
}

int Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end() || is_special(it->second))
    fail(ErrorCode::unknown_word, "unknown word '" + std::string(word) + "'");
  return it->second;
}

const std::string& Vocabulary::token(int id) const {
  require(id >= 0 && id < size(), ErrorCode::out_of_range, "token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::string> Vocabulary::words() const {
  return {tokens_.begin() + kNumSpecial, tokens_.end()};
}

std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab) {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
  return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(!vocab.is_special(ids[i]), ErrorCode::invalid_argument,
            "cannot detokenize special token id " + std::to_string(ids[i]));
    if (i > 0) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

int CorpusStats::sample_length(Rng& rng) const {
  require(!length_histogram.empty(), ErrorCode::invalid_argument, "empty length histogram");
  int total = 0;
  for (const auto& [len, n] : length_histogram) total += n;
  int pick = rng.uniform_int(0, total - 1);
  for (const auto& [len, n] : length_histogram) {
    if (pick < n) return len;
    pick -= n;
  }
  return length_histogram.rbegin()->first;
}

std::string_view family_name(MotionFamily family) {
  return kFamilyNames[static_cast<std::size_t>(family)];
}

Vocabulary corpus_vocabulary() {
  std::vector<std::string> words;
  auto add = [&](std::string_view text) {
    for (auto& w : split_words(text)) words.push_back(std::move(w));
  };
  add(kTextToMotionPrompt);
  add(kMotionToTextPrompt);
  for (const auto& s : kSubjects) add(s.words);
  for (const auto& p : kFamilyPhrases) add(p);
  for (const auto& t : kTempos) add(t.word);
  add("with");
  for (const auto& s : kSizes) add(s.word);
  add("movements");
  return Vocabulary(words);
}

std::vector<CorpusPair> generate_corpus(std::uint64_t seed, int count, int d_motion) {
  require(count >= 1, ErrorCode::invalid_argument, "corpus count must be >= 1");
  require(d_motion >= kMinMotionDim, ErrorCode::invalid_argument,
          "d_motion must be >= " + std::to_string(kMinMotionDim) + " to encode the family parameters");
  const Vocabulary vocab = corpus_vocabulary();
  std::vector<CorpusPair> pairs;
  pairs.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(seed, "corpus", static_cast<std::uint64_t>(i));
    const int family = rng.uniform_int(0, kNumFamilies - 1);
    const auto& subject = kSubjects[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(kSubjects.size()) - 1))];
    const auto& tempo = kTempos[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(kTempos.size()) - 1))];
    const auto& size = kSizes[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(kSizes.size()) - 1))];
    const int n_frames = rng.uniform_int(kMinFrames, kMaxFrames);
    ClipParams p;
    p.family = static_cast<MotionFamily>(family);
    p.height = subject.height + rng.uniform(-0.02, 0.02);
    p.period = tempo.period * rng.uniform(0.95, 1.05);
    p.amp = rng.uniform(size.amp_lo, size.amp_hi);
    p.phase0 = rng.uniform(0.0, 2.0 * kPi);

    CorpusPair pair;
    pair.family = p.family;
    pair.caption.text = std::string(subject.words) + " " + std::string(kFamilyPhrases[static_cast<std::size_t>(family)]) +
                        " " + std::string(tempo.word) + " with " + std::string(size.word) + " movements";
    pair.caption.token_ids = tokenize(pair.caption.text, vocab);
    pair.motion = render_clip(p, n_frames, d_motion, rng);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

CorpusStats compute_stats(const std::vector<MotionSequence>& motions) {
  require(motions.size() >= 2, ErrorCode::invalid_argument, "normalization needs at least 2 motions");
  const int d = motions.front().feature_dim();
  std::vector<double> sum(static_cast<std::size_t>(d), 0.0);
  std::size_t pooled = 0;
  CorpusStats stats;
  for (const auto& m : motions) {
    require(m.feature_dim() == d, ErrorCode::shape_mismatch, "motions disagree on feature_dim");
    for (int i = 0; i < m.n_frames(); ++i)
      for (int k = 0; k < d; ++k) sum[static_cast<std::size_t>(k)] += m.frames(i, k);
    pooled += static_cast<std::size_t>(m.n_frames());
    stats.length_histogram[m.n_frames()] += 1;
  }
  require(pooled >= 2, ErrorCode::invalid_argument, "normalization needs at least 2 pooled frames");
  stats.mean.resize(static_cast<std::size_t>(d));
  stats.std.resize(static_cast<std::size_t>(d));
  for (int k = 0; k < d; ++k) stats.mean[static_cast<std::size_t>(k)] = sum[static_cast<std::size_t>(k)] / pooled;
  std::vector<double> sq(static_cast<std::size_t>(d), 0.0);
  for (const auto& m : motions)
    for (int i = 0; i < m.n_frames(); ++i)
      for (int k = 0; k < d; ++k) {
        const double c = m.frames(i, k) - stats.mean[static_cast<std::size_t>(k)];
        sq[static_cast<std::size_t>(k)] += c * c;
      }
  for (int k = 0; k < d; ++k) {
    const double s = std::sqrt(sq[static_cast<std::size_t>(k)] / pooled);
    if (!(s > 1e-12))
      fail(ErrorCode::zero_variance, "zero-variance motion dimension " + std::to_string(k));
    stats.std[static_cast<std::size_t>(k)] = s;
  }
  return stats;
}

MotionSequence apply_normalization(const MotionSequence& motion, const CorpusStats& stats) {
  require(motion.feature_dim() == stats.feature_dim(), ErrorCode::shape_mismatch,
          "motion feature_dim does not match stats");
  MotionSequence out = motion;
  for (int k = 0; k < motion.feature_dim(); ++k) {
    out.frames.col(k).array() -= stats.mean[static_cast<std::size_t>(k)];
    out.frames.col(k).array() /= stats.std[static_cast<std::size_t>(k)];
  }
  return out;
}

MotionSequence denormalize(const MotionSequence& motion, const CorpusStats& stats) {
  require(motion.feature_dim() == stats.feature_dim(), ErrorCode::shape_mismatch,
          "motion feature_dim does not match stats");
  MotionSequence out = motion;
  for (int k = 0; k < motion.feature_dim(); ++k) {
    out.frames.col(k).array() *= stats.std[static_cast<std::size_t>(k)];
    out.frames.col(k).array() += stats.mean[static_cast<std::size_t>(k)];
  }
  return out;
}

NormalizedMotions normalize(const std::vector<MotionSequence>& motions) {
  NormalizedMotions out;
  out.stats = compute_stats(motions);
  out.motions.reserve(motions.size());
  for (const auto& m : motions) out.motions.push_back(apply_normalization(m, out.stats));
  return out;
}

Corpus build_corpus(std::uint64_t seed, int count, int d_motion) {
  Corpus c;
  c.seed = seed;
  c.d_motion = d_motion;
  c.vocab = corpus_vocabulary();
  c.pairs = generate_corpus(seed, count, d_motion);
  std::vector<MotionSequence> motions;
  motions.reserve(c.pairs.size());
  for (const auto& p : c.pairs) motions.push_back(p.motion);
  c.stats = compute_stats(motions);
  return c;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::io_error, "cannot open for writing: " + path);
  out << stats_to_json(corpus).dump() << '\n';
  for (std::size_t i = 0; i < corpus.pairs.size(); ++i) {
    const auto& p = corpus.pairs[i];
    const auto& f = p.motion.frames;
    json rec{{"type", "pair"},
             {"id", i},
             {"family", family_name(p.family)},
             {"caption", p.caption.text},
             {"token_ids", p.caption.token_ids},
             {"n_frames", p.motion.n_frames()},
             {"d_motion", p.motion.feature_dim()},
             {"frames", std::vector<double>(f.data(), f.data() + f.size())}};
    out << rec.dump() << '\n';
  }
  require(out.good(), ErrorCode::io_error, "write failed: " + path);
}

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::io_error, "cannot open corpus: " + path);
  Corpus c;
  std::string line;
  int line_no = 0;
  bool have_stats = false;
  auto malformed = [&](const std::string& why) {
    fail(ErrorCode::parse_error, path + ":" + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      malformed(std::string("malformed JSON: ") + e.what());
    }
    try {
      const std::string type = rec.at("type").get<std::string>();
      if (type == "stats") {
        if (have_stats) malformed("duplicate stats record");
        c.seed = rec.at("seed").get<std::uint64_t>();
        c.d_motion = rec.at("d_motion").get<int>();
        c.stats.mean = rec.at("mean").get<std::vector<double>>();
        c.stats.std = rec.at("std").get<std::vector<double>>();
        for (const auto& [k, v] : rec.at("length_histogram").items()) c.stats.length_histogram[std::stoi(k)] = v.get<int>();
        auto tokens = rec.at("vocab").get<std::vector<std::string>>();
        if (tokens.size() < Vocabulary::kNumSpecial) malformed("vocab lacks special tokens");
        c.vocab = Vocabulary(std::vector<std::string>(tokens.begin() + Vocabulary::kNumSpecial, tokens.end()));
        if (c.vocab.tokens() != tokens) malformed("vocab is not in canonical order");
        have_stats = true;
      } else if (type == "pair") {
        if (!have_stats) malformed("pair record before stats record");
        CorpusPair p;
        p.caption.text = rec.at("caption").get<std::string>();
        p.caption.token_ids = rec.at("token_ids").get<std::vector<int>>();
        const std::string fam = rec.at("family").get<std::string>();
        auto it = std::find(kFamilyNames.begin(), kFamilyNames.end(), fam);
        if (it == kFamilyNames.end()) malformed("unknown family '" + fam + "'");
        p.family = static_cast<MotionFamily>(it - kFamilyNames.begin());
        const int n = rec.at("n_frames").get<int>();
        const int d = rec.at("d_motion").get<int>();
        const auto values = rec.at("frames").get<std::vector<double>>();
        if (n < 1 || d != c.d_motion || values.size() != static_cast<std::size_t>(n) * d)
          malformed("frames shape does not match n_frames x d_motion");
        p.motion.frames = Eigen::Map<const Mat<double>>(values.data(), n, d);
        if (!p.motion.frames.allFinite()) malformed("non-finite frame value");
        c.pairs.push_back(std::move(p));
      } else {
        malformed("unknown record type '" + type + "'");
      }
    } catch (const json::exception& e) {
      malformed(std::string("bad record: ") + e.what());
    }
  }
  if (!have_stats) fail(ErrorCode::parse_error, path + ": missing stats record");
  return c;
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "test") return Split::test;
  if (name == "all") return Split::all;
  fail(ErrorCode::invalid_argument, "unknown split '" + std::string(name) + "'");
}

std::vector<CorpusPair> corpus_split(const Corpus& corpus, Split split, double test_fraction) {
  const auto n = corpus.pairs.size();
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  const auto cut = n - std::min(n_test, n);
  switch (split) {
    case Split::train: return {corpus.pairs.begin(), corpus.pairs.begin() + static_cast<std::ptrdiff_t>(cut)};
    case Split::test: return {corpus.pairs.begin() + static_cast<std::ptrdiff_t>(cut), corpus.pairs.end()};
    case Split::all: return corpus.pairs;
  }
  return {};
}

std::vector<CorpusPair> normalized_pairs(const std::vector<CorpusPair>& pairs, const CorpusStats& stats) {
  std::vector<CorpusPair> out = pairs;
  for (auto& p : out) p.motion = apply_normalization(p.motion, stats);
  return out;
}

}  // namespace momug
