#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include <Eigen/Dense>

#include "momug/error.hpp"
#include "momug/metrics.hpp"

using namespace momug;

namespace {

// Denman-Beavers iteration for the principal square root; used only as a
// second route to Tr((Sa Sb)^(1/2)).
Eigen::MatrixXd sqrtm_db(const Eigen::MatrixXd& a) {
  Eigen::MatrixXd y = a, z = Eigen::MatrixXd::Identity(a.rows(), a.cols());
  for (int i = 0; i < 100; ++i) {
    const Eigen::MatrixXd yi = y.inverse(), zi = z.inverse();
    y = 0.5 * (y + zi);
    z = 0.5 * (z + yi);
  }
  return y;
}

double fid_oracle(const Mat<double>& a, const Mat<double>& b) {
  auto cov = [](const Mat<double>& x) {
    const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
    Eigen::MatrixXd s = c.transpose() * c / static_cast<double>(x.rows() - 1);
    s.diagonal().array() += 1e-6;
    return s;
  };
  const Eigen::MatrixXd sa = cov(a), sb = cov(b);
  const double mean = (a.colwise().mean() - b.colwise().mean()).squaredNorm();
  return mean + sa.trace() + sb.trace() - 2.0 * sqrtm_db(sa * sb).trace();
}

Words w(const std::string& s) { return split_words(s); }

// Brute-force CIDEr over joined-string n-grams.
double cider_oracle(const Words& cand, const std::vector<Words>& refs, const std::vector<std::vector<Words>>& all) {
  auto grams = [](const Words& x, int n) {
    std::map<std::string, double> g;
    for (int i = 0; i + n <= static_cast<int>(x.size()); ++i) {
      std::string key;
      for (int k = 0; k < n; ++k) key += x[static_cast<std::size_t>(i + k)] + "|";
      g[key] += 1;
    }
    return g;
  };
  double total = 0;
  for (int n = 1; n <= 4; ++n) {
    auto idf = [&](const std::string& key) {
      double df = 0;
      for (const auto& set : all) {
        bool hit = false;
        for (const auto& r : set) hit = hit || grams(r, n).count(key) > 0;
        df += hit ? 1 : 0;
      }
      return std::log(static_cast<double>(all.size()) / std::max(1.0, df));
    };
    auto vec = [&](const Words& x) {
      auto g = grams(x, n);
      for (auto& [k, v] : g) v *= idf(k);
      return g;
    };
    const auto vc = vec(cand);
    double s = 0;
    for (const auto& r : refs) {
      const auto vr = vec(r);
      double dot = 0, nc = 0, nr = 0;
      for (const auto& [k, v] : vc) {
        nc += v * v;
        if (vr.count(k)) dot += v * vr.at(k);
      }
      for (const auto& [k, v] : vr) nr += v * v;
      const double cos = (nc == 0 || nr == 0) ? 0 : dot / std::sqrt(nc * nr);
      const double dl = static_cast<double>(cand.size()) - static_cast<double>(r.size());
      s += std::exp(-dl * dl / 72.0) * cos;
    }
    total += s / static_cast<double>(refs.size());
  }
  return 10.0 * total / 4.0;
}

}  // namespace

TEST_CASE("fid of a set with itself is zero") {
  Rng rng(1, "fid");
  const Mat<double> x = rng.normal_matrix<double>(500, 8);
  CHECK(std::abs(fid(x, x)) < 1e-8);
}

TEST_CASE("fid agrees with an independent matrix square root") {
  Rng rng(2, "fid");
  Mat<double> a = rng.normal_matrix<double>(400, 5);
  Mat<double> b = rng.normal_matrix<double>(300, 5) * 1.7;
  b.col(1) += 0.5 * b.col(0);
  b.array() += 0.3;
  CHECK(fid(a, b) == doctest::Approx(fid_oracle(a, b)).epsilon(1e-8));
}

TEST_CASE("fid one-dimensional closed form") {
  Rng rng(3, "fid");
  const Mat<double> a = rng.normal_matrix<double>(1000, 1) * 2.0;
  const Mat<double> b = (rng.normal_matrix<double>(800, 1) * 0.5).array() + 1.0;
  auto moments = [](const Mat<double>& x) {
    const double m = x.mean();
    return std::pair{m, (x.array() - m).square().sum() / static_cast<double>(x.rows() - 1) + 1e-6};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double want = (ma - mb) * (ma - mb) + std::pow(std::sqrt(va) - std::sqrt(vb), 2);
  CHECK(fid(a, b) == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("fid mean offset approaches the squared offset and scales quadratically") {
  Rng rng(4, "fid");
  const int n = 10000, d = 8;
  RowVec<double> delta = RowVec<double>::Zero(d);
  delta.head(4).setConstant(1.0);
  const Mat<double> a = rng.normal_matrix<double>(n, d);
  const Mat<double> b = rng.normal_matrix<double>(n, d).rowwise() + delta;
  const double f = fid(a, b);
  CHECK(std::abs(f - delta.squaredNorm()) < 0.05 * delta.squaredNorm());
  const double f3 = fid(3.0 * a, 3.0 * b);
  CHECK(f3 == doctest::Approx(9.0 * f).epsilon(1e-4));
  CHECK(std::abs(fid(a, b) - fid(b, a)) < 1e-6);
}

TEST_CASE("fid input checks") {
  Rng rng(5, "fid");
  const Mat<double> small = rng.normal_matrix<double>(4, 8);
  const Mat<double> ok = rng.normal_matrix<double>(40, 8);
  CHECK_THROWS_AS(fid(small, ok), Error);
  CHECK_THROWS_AS(fid(ok, rng.normal_matrix<double>(40, 7)), Error);
}

TEST_CASE("r_precision oracles") {
  Rng rng(6, "rp");
  const Mat<double> x = rng.normal_matrix<double>(320, 8);
  const auto perfect = r_precision(x, x, 1);
  CHECK(perfect.top1 == 1.0);
  CHECK(perfect.n == 320);

  // 1000 groups of independent random features: top-1 near 1/32.
  const int n = 32 * 1000;
  const Mat<double> m = rng.normal_matrix<double>(n, 8), t = rng.normal_matrix<double>(n, 8);
  const auto r = r_precision(m, t, 2);
  const double p = 1.0 / 32.0;
  CHECK(std::abs(r.top1 - p) < 3.0 * std::sqrt(p * (1 - p) / n));
  CHECK(r.top1 <= r.top2);
  CHECK(r.top2 <= r.top3);
  CHECK(std::abs(r.top3 - 3 * p) < 3.0 * std::sqrt(3 * p * (1 - 3 * p) / n));

  // Partial groups are dropped.
  CHECK(r_precision(x.topRows(70), x.topRows(70), 1).n == 64);
  CHECK_THROWS_AS(r_precision(x.topRows(20), x.topRows(20), 1), Error);
}

TEST_CASE("r_precision hand case with group of three") {
  // Motion 0 sits nearest caption 1, so it ranks its own caption second.
  Mat<double> m(3, 1), t(3, 1);
  m << 0.0, 10.0, 20.0;
  t << 0.8, 0.5, 20.0;
  const auto r = r_precision(m, t, 0, 3);
  // motion0: caption1 (0.5) beats its own 0.8 -> rank 2.
  // motion1: caption0 (9.2) beats its own 9.5 -> rank 2. motion2: rank 1.
  CHECK(r.top1 == doctest::Approx(1.0 / 3.0));
  CHECK(r.top2 == 1.0);

  // An identical caption ties and does not outrank the true one.
  Mat<double> tt(3, 1);
  tt << 0.5, 0.5, 20.0;
  CHECK(r_precision(m, tt, 0, 3).top1 == 1.0);
}

TEST_CASE("mm_dist, diversity and multimodality hand cases") {
  Mat<double> m(2, 2), t(2, 2);
  m << 0, 0, 1, 1;
  t << 3, 4, 1, 1;
  CHECK(mm_dist(m, t) == doctest::Approx(2.5));
  CHECK(mm_dist(t, t) == 0.0);

  const Mat<double> simplex = Mat<double>::Identity(6, 6);
  CHECK(diversity(simplex, 3, 4) == doctest::Approx(std::sqrt(2.0)));
  CHECK(diversity(simplex, 50, 4) == doctest::Approx(std::sqrt(2.0)));

  Mat<double> g1(2, 1), g2(2, 1);
  g1 << 0, 2;
  g2 << 5, 7;
  CHECK(multimodality({g1, g2}) == doctest::Approx(2.0));
  CHECK(multimodality({Mat<double>::Ones(3, 2)}) == 0.0);

  Rng rng(7, "mm");
  std::vector<Mat<double>> groups;
  double want = 0;
  for (int k = 0; k < 5; ++k) {
    groups.push_back(rng.normal_matrix<double>(6, 3));
    double s = 0;
    int c = 0;
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j)
        if (i != j) {
          s += (groups.back().row(i) - groups.back().row(j)).norm();
          ++c;
        }
    want += s / c;
  }
  CHECK(multimodality(groups) == doctest::Approx(want / 5));
}

TEST_CASE("bleu cases") {
  const Words ref = w("a man walks forward slowly with big movements");
  CHECK(bleu(ref, {ref}, 4) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(bleu(w("zebra zebra zebra zebra"), {ref}, 4) < 1e-6);
  CHECK(bleu({}, {ref}, 4) == 0.0);

  // Clipping: seven "the" against references with at most two.
  const std::vector<Words> refs{w("the cat is on the mat"), w("there is a cat on the mat")};
  const Words cand = w("the the the the the the the");
  CHECK(bleu(cand, refs, 1) == doctest::Approx(2.0 / 7.0).epsilon(1e-10));

  // Brevity penalty: exact n-gram matches, length 3 vs 6.
  CHECK(bleu(w("the cat sat"), {w("the cat sat on the mat")}, 2) == doctest::Approx(std::exp(-1.0)).epsilon(1e-10));

  // Corpus pooling: matches 3+1 of 3+2 unigrams, no brevity penalty (5 vs 5).
  const std::vector<Words> cands{w("a b c"), w("d x")};
  const std::vector<std::vector<Words>> crefs{{w("a b c")}, {w("d e")}};
  CHECK(corpus_bleu(cands, crefs, 1) == doctest::Approx(4.0 / 5.0).epsilon(1e-10));
  for (const auto& c : cands) {
    const double b = bleu(c, {w("a b c")}, 4);
    CHECK(b >= 0.0);
    CHECK(b <= 1.0);
  }
}

TEST_CASE("rouge-l cases") {
  const Words ref = w("a tall man walks slowly");
  CHECK(rouge_l(ref, ref) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(rouge_l(w("zebra runs"), ref) == 0.0);
  // LCS "a man walks" = 3; P = 3/4, R = 3/5.
  const double p = 0.75, r = 0.6;
  CHECK(rouge_l(w("a man walks quickly"), ref) == doctest::Approx(2.2 * p * r / (r + 1.2 * p)).epsilon(1e-10));
  CHECK(lcs_length(w("a b c d"), w("b d a c")) == 2);
}

TEST_CASE("cider cases") {
  const std::vector<std::vector<Words>> refs{{w("a man walks forward slowly")},
                                             {w("a child jumps up and down")},
                                             {w("a woman waves the right hand")}};
  // A candidate equal to its sole reference beats every other candidate.
  const std::vector<Words> cands{w("a man walks forward slowly"), w("a man walks forward"), w("a child walks")};
  auto varied_cands = cands;
  varied_cands.push_back(w("a child jumps"));
  varied_cands.push_back(w("a woman waves"));
  const std::vector<std::vector<Words>> varied_refs{refs[0], refs[0], refs[0], refs[1], refs[2]};
  const auto scores = cider_scores(varied_cands, varied_refs);
  CHECK(scores[0] > scores[1]);
  CHECK(scores[0] > scores[2]);

  CHECK(cider_scores({Words{}}, {refs[0]})[0] == 0.0);

  // Micro-corpus against the brute-force oracle.
  const std::vector<Words> micro{w("a man walks forward"), w("a child jumps up and down"), w("a woman waves")};
  const auto got = cider_scores(micro, refs);
  for (std::size_t i = 0; i < 3; ++i) CHECK(got[i] == doctest::Approx(cider_oracle(micro[i], refs[i], refs)).epsilon(1e-6));
  CHECK(cider(micro, refs) == doctest::Approx((got[0] + got[1] + got[2]) / 3));
}

TEST_CASE("split_words") {
  CHECK(split_words("  a  b c ") == Words{"a", "b", "c"});
  CHECK(split_words("").empty());
}
