#include <doctest.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "momug/corpus.hpp"
#include "momug/error.hpp"

using namespace momug;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("momug_test_" + name)).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Shape descriptor that ignores the subject's height offset: per-channel mean
// (channel 2 dropped) and per-channel spread.
std::vector<double> clip_features(const Mat<double>& f) {
  std::vector<double> out;
  for (Eigen::Index c = 0; c < f.cols(); ++c) {
    const double mean = f.col(c).mean();
    if (c != 2) out.push_back(mean);
    out.push_back(std::sqrt((f.col(c).array() - mean).square().mean()));
  }
  return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb);
}

}  // namespace

TEST_CASE("generated pairs respect the shape contract") {
  const auto pairs = generate_corpus(7, 4, 8);
  REQUIRE(pairs.size() == 4);
  for (const auto& p : pairs) {
    CHECK(p.motion.feature_dim() == 8);
    CHECK(p.motion.n_frames() >= kMinFrames);
    CHECK(p.motion.n_frames() <= kMaxFrames);
    CHECK(p.motion.frames.allFinite());
  }
  CHECK_THROWS_AS(generate_corpus(7, 4, 3), Error);
  CHECK_THROWS_AS(generate_corpus(7, 0, 8), Error);
}

TEST_CASE("other widths fold and extend the kinematic channels") {
  for (int d : {4, 6, 12}) {
    const auto pairs = generate_corpus(2, 3, d);
    for (const auto& p : pairs) CHECK(p.motion.feature_dim() == d);
  }
}

TEST_CASE("same seed gives byte-identical corpus files") {
  const auto a = temp_path("det_a.jsonl"), b = temp_path("det_b.jsonl");
  save_corpus(build_corpus(11, 30, 8), a);
  save_corpus(build_corpus(11, 30, 8), b);
  CHECK(slurp(a) == slurp(b));
  save_corpus(build_corpus(12, 30, 8), b);
  CHECK(slurp(a) != slurp(b));
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST_CASE("family is recoverable by nearest template") {
  // Templates come from an independent draw; the test set is the 2000-pair corpus.
  const auto reference = generate_corpus(1234, 800, 8);
  constexpr int kFamilies = 8;
  std::array<std::vector<double>, kFamilies> centroid;
  std::array<int, kFamilies> count{};
  for (const auto& p : reference) {
    const auto f = clip_features(p.motion.frames);
    auto& c = centroid[static_cast<std::size_t>(p.family)];
    if (c.empty()) c.assign(f.size(), 0.0);
    for (std::size_t i = 0; i < f.size(); ++i) c[i] += f[i];
    ++count[static_cast<std::size_t>(p.family)];
  }
  for (int k = 0; k < kFamilies; ++k) REQUIRE(count[static_cast<std::size_t>(k)] > 0);

  const auto test = generate_corpus(7, 2000, 8);
  int correct = 0;
  for (const auto& p : test) {
    const auto f = clip_features(p.motion.frames);
    int best = 0;
    double best_sim = -2.0;
    for (int k = 0; k < kFamilies; ++k) {
      const double s = cosine(f, centroid[static_cast<std::size_t>(k)]);
      if (s > best_sim) {
        best_sim = s;
        best = k;
      }
    }
    correct += best == static_cast<int>(p.family) ? 1 : 0;
  }
  const double accuracy = correct / 2000.0;
  INFO("template accuracy " << accuracy);
  CHECK(accuracy > 0.99);
}

TEST_CASE("tokenizer round-trips corpus captions") {
  const auto vocab = corpus_vocabulary();
  for (const auto& p : generate_corpus(5, 200, 8)) {
    CHECK(detokenize(p.caption.token_ids, vocab) == p.caption.text);
    for (int id : p.caption.token_ids) CHECK_FALSE(vocab.is_special(id));
  }
  CHECK(tokenize("", vocab).empty());
  const auto ids = tokenize("a man walks forward quickly", vocab);
  REQUIRE(ids.size() == 5);
  for (int id : ids) CHECK(id < vocab.size());
  CHECK(vocab.token(ids[1]) == "man");

  try {
    tokenize("a man moonwalks", vocab);
    FAIL("expected unknown_word");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::unknown_word);
    CHECK(std::string(e.what()).find("moonwalks") != std::string::npos);
  }
  CHECK_THROWS_AS(detokenize({Vocabulary::kEos}, vocab), Error);
}

TEST_CASE("vocabulary ids are dense with distinct specials") {
  const auto vocab = corpus_vocabulary();
  const auto tokens = vocab.tokens();
  REQUIRE(static_cast<int>(tokens.size()) == vocab.size());
  for (int id = Vocabulary::kNumSpecial; id < vocab.size(); ++id)
    CHECK(vocab.id(tokens[static_cast<std::size_t>(id)]) == id);
  // Special spellings are not words, so text can never smuggle one in.
  CHECK_THROWS_AS(vocab.id("<eos>"), Error);
  for (int id : {Vocabulary::kPad, Vocabulary::kBos, Vocabulary::kEos, Vocabulary::kSom, Vocabulary::kEom,
                 Vocabulary::kNul})
    CHECK(vocab.is_special(id));
  CHECK(vocab.contains("caption:"));
  CHECK(vocab.contains("motion:"));
}

TEST_CASE("normalization is a z-score with an exact inverse") {
  const auto pairs = generate_corpus(9, 50, 8);
  std::vector<MotionSequence> motions;
  for (const auto& p : pairs) motions.push_back(p.motion);
  const auto norm = normalize(motions);
  const int d = 8;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(d), sq = Eigen::VectorXd::Zero(d);
  double frames = 0;
  for (const auto& m : norm.motions) {
    sum += m.frames.colwise().sum().transpose();
    sq += m.frames.array().square().matrix().colwise().sum().transpose();
    frames += static_cast<double>(m.n_frames());
  }
  for (int k = 0; k < d; ++k) {
    CHECK(std::abs(sum(k) / frames) < 1e-6);
    CHECK(std::abs(std::sqrt(sq(k) / frames) - 1.0) < 1e-6);
  }
  double worst = 0;
  for (std::size_t i = 0; i < motions.size(); ++i)
    worst = std::max(worst, (denormalize(norm.motions[i], norm.stats).frames - motions[i].frames).cwiseAbs().maxCoeff());
  CHECK(worst < 1e-9);
}

TEST_CASE("zero-variance dimension is reported by index") {
  auto pairs = generate_corpus(9, 5, 8);
  std::vector<MotionSequence> motions;
  for (auto& p : pairs) {
    p.motion.frames.col(3).setZero();
    motions.push_back(p.motion);
  }
  try {
    normalize(motions);
    FAIL("expected zero_variance");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::zero_variance);
    CHECK(std::string(e.what()).find('3') != std::string::npos);
  }
}

TEST_CASE("corpus file round trip") {
  const auto path = temp_path("rt.jsonl");
  const auto corpus = build_corpus(21, 25, 8);
  save_corpus(corpus, path);
  const auto loaded = load_corpus(path);
  REQUIRE(loaded.pairs.size() == corpus.pairs.size());
  CHECK(loaded.seed == corpus.seed);
  CHECK(loaded.d_motion == 8);
  CHECK(loaded.vocab.tokens() == corpus.vocab.tokens());
  CHECK(loaded.stats.length_histogram == corpus.stats.length_histogram);
  for (std::size_t i = 0; i < corpus.pairs.size(); ++i) {
    CHECK(loaded.pairs[i].caption.token_ids == corpus.pairs[i].caption.token_ids);
    CHECK(loaded.pairs[i].caption.text == corpus.pairs[i].caption.text);
    CHECK(loaded.pairs[i].family == corpus.pairs[i].family);
    CHECK((loaded.pairs[i].motion.frames - corpus.pairs[i].motion.frames).cwiseAbs().maxCoeff() <= 1e-12);
  }
  for (int k = 0; k < 8; ++k) {
    CHECK(std::abs(loaded.stats.mean[static_cast<std::size_t>(k)] - corpus.stats.mean[static_cast<std::size_t>(k)]) <= 1e-12);
    CHECK(std::abs(loaded.stats.std[static_cast<std::size_t>(k)] - corpus.stats.std[static_cast<std::size_t>(k)]) <= 1e-12);
  }
  std::filesystem::remove(path);
}

TEST_CASE("malformed corpus line reports its line number") {
  const auto path = temp_path("bad.jsonl");
  save_corpus(build_corpus(21, 3, 8), path);
  {
    std::ofstream out(path, std::ios::app);
    out << "{\"type\": \"pair\", \"caption\": \n";
  }
  try {
    load_corpus(path);
    FAIL("expected parse_error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::parse_error);
    CHECK(std::string(e.what()).find(":5") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("test split is the deterministic tail") {
  const auto corpus = build_corpus(4, 20, 8);
  const auto train = corpus_split(corpus, Split::train);
  const auto test = corpus_split(corpus, Split::test);
  CHECK(train.size() == 18);
  CHECK(test.size() == 2);
  CHECK(test[0].caption.text == corpus.pairs[18].caption.text);
  CHECK(corpus_split(corpus, Split::all).size() == 20);
  CHECK(parse_split("test") == Split::test);
  CHECK_THROWS_AS(parse_split("dev"), Error);
}

TEST_CASE("length histogram sampling stays in support") {
  const auto corpus = build_corpus(4, 100, 8);
  Rng rng(1, "len");
  for (int i = 0; i < 200; ++i) {
    const int n = corpus.stats.sample_length(rng);
    CHECK(corpus.stats.length_histogram.count(n) == 1);
  }
}
