#include <chrono>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "smoothcert/certify.hpp"
#include "smoothcert/parallel.hpp"
#include "smoothcert/stats.hpp"
#include "smoothcert/testing/oracles.hpp"

using namespace smoothcert;

namespace {

// Returns class 0 for the first `k` queries and class 1 afterwards, whatever
// the input; lets a test dictate the tallies exactly.
struct ScriptedClassifier {
  std::size_t k;
  mutable std::size_t calls = 0;

  std::size_t num_classes() const { return 2; }
  std::vector<int> classify(const Tensor& batch) const {
    std::vector<int> out(batch.dim(0));
    for (int& c : out) c = calls++ < k ? 0 : 1;
    return out;
  }
};

struct LinearCase {
  LinearClassifier clf;
  Tensor x;
  std::vector<double> xd;
};

// sign(w.x) in d dimensions with x placed at distance `dist` from the boundary.
LinearCase linear_case(std::size_t d, double dist, std::uint64_t seed) {
  Rng rng(seed);
  LinearCase c;
  c.clf.w.resize(d);
  double norm = 0.0;
  for (double& v : c.clf.w) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  c.clf.b = 0.3;
  c.xd.resize(d);
  // x = w/|w| * (dist - b/|w|) puts w.x + b = dist * |w|.
  for (std::size_t i = 0; i < d; ++i) c.xd[i] = c.clf.w[i] / norm * (dist - c.clf.b / norm);
  c.x = Tensor(Shape{d});
  for (std::size_t i = 0; i < d; ++i) c.x[i] = static_cast<float>(c.xd[i]);
  // Re-read the float input so the oracle sees exactly what is classified.
  for (std::size_t i = 0; i < d; ++i) c.xd[i] = c.x[i];
  return c;
}

}  // namespace

TEST(InvNormCdf, MatchesTheSeriesOracle) {
  EXPECT_EQ(inv_norm_cdf(0.5), 0.0);
  EXPECT_NEAR(inv_norm_cdf(0.84134), oracle::inv_norm_cdf(0.84134), 1e-9);
  EXPECT_NEAR(inv_norm_cdf(0.84134), 1.0, 1e-4);
  EXPECT_NEAR(inv_norm_cdf(0.001), -3.0902, 1e-4);
  EXPECT_NEAR(inv_norm_cdf(0.001), oracle::inv_norm_cdf(0.001), 1e-9);
  for (const double p : {1e-10, 1e-7, 3e-4, 0.02, 0.3, 0.6, 0.97, 1 - 1e-6, 1 - 1e-10}) {
    EXPECT_NEAR(inv_norm_cdf(p), oracle::inv_norm_cdf(p), 1e-9) << p;
  }
}

TEST(InvNormCdf, OddSymmetryOnDyadicProbabilities) {
  for (int e = 2; e <= 33; ++e) {
    const double p = std::ldexp(1.0, -e);
    EXPECT_NEAR(inv_norm_cdf(1.0 - p), -inv_norm_cdf(p), 1e-12) << p;
  }
}

TEST(InvNormCdf, RejectsOutOfRange) {
  EXPECT_THROW(inv_norm_cdf(0.0), NumericError);
  EXPECT_THROW(inv_norm_cdf(1.0), NumericError);
  EXPECT_THROW(inv_norm_cdf(-0.1), NumericError);
  EXPECT_THROW(inv_norm_cdf(std::nan("")), NumericError);
}

TEST(InvNormCdf, MillionEvaluationsUnderASecond) {
  const auto start = std::chrono::steady_clock::now();
  double sink = 0.0;
  for (int i = 1; i <= 1000000; ++i) sink += inv_norm_cdf(i / 1000001.0);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_NEAR(sink, 0.0, 1e-6);
  EXPECT_LT(secs, 1.0);
}

TEST(ClopperPearson, ClosedForms) {
  EXPECT_EQ(clopper_pearson_lower(0, 50, 0.001), 0.0);
  for (const std::size_t n : {1u, 10u, 100u, 10000u}) {
    EXPECT_NEAR(clopper_pearson_lower(n, n, 0.001), std::pow(0.001, 1.0 / double(n)), 1e-15);
  }
}

TEST(ClopperPearson, MatchesLogSpaceTailSums) {
  const oracle::LogFactorials lf(1000);
  EXPECT_NEAR(clopper_pearson_lower(95, 100, 0.001),
              oracle::clopper_pearson_lower(95, 100, 0.001, lf), 1e-9);
  for (const std::size_t n : {2u, 13u, 100u, 999u}) {
    for (std::size_t k = 1; k < n; k += std::max<std::size_t>(1, n / 17)) {
      EXPECT_NEAR(clopper_pearson_lower(k, n, 0.001),
                  oracle::clopper_pearson_lower(k, n, 0.001, lf), 1e-9)
          << k << "/" << n;
    }
  }
}

TEST(ClopperPearson, BoundHasTheStatedTailProbability) {
  const oracle::LogFactorials lf(200);
  const double p = clopper_pearson_lower(150, 200, 0.01);
  EXPECT_NEAR(oracle::binomial_tail(150, 200, p, lf), 0.01, 1e-9);
}

TEST(ClopperPearson, RejectsInvalidArguments) {
  EXPECT_THROW(clopper_pearson_lower(5, 4, 0.01), NumericError);
  EXPECT_THROW(clopper_pearson_lower(1, 0, 0.01), NumericError);
  EXPECT_THROW(clopper_pearson_lower(1, 4, 1.0), NumericError);
}

TEST(Certify, HalfBoundAbstains) {
  // k = 0 of n gives p_lower = 0; a 50/50 split stays below the boundary too.
  SmoothingParams p;
  p.n0 = 10;
  p.n = 100;
  const auto r = certify(ScriptedClassifier{60}, Tensor(Shape{1}), p);
  EXPECT_EQ(r.c_A, 0);
  EXPECT_EQ(r.k, 50u);
  EXPECT_TRUE(r.abstain);
  EXPECT_EQ(r.radius, 0.0);
}

TEST(Certify, RadiusFromBound) {
  EXPECT_NEAR(0.25 * inv_norm_cdf(0.999), 0.7726, 1e-4);
  EXPECT_NEAR(0.25 * inv_norm_cdf(0.999), 0.25 * oracle::inv_norm_cdf(0.999), 1e-10);
  // Symmetric form with p_B = 1 - p_A reduces to sigma * inv(p_A).
  const double pa = 0.84134;
  const double symmetric = 0.5 * (inv_norm_cdf(pa) - inv_norm_cdf(1 - pa));
  EXPECT_NEAR(symmetric, 1.0, 1e-4);
  EXPECT_NEAR(symmetric, inv_norm_cdf(pa), 1e-12);
}

TEST(Certify, RecordMatchesDefinition) {
  SmoothingParams p;
  p.sigma = 0.5;
  p.n0 = 64;
  p.n = 1000;
  p.seed = 4;
  // All selection draws and 990 of the estimation draws are class 0.
  const auto r = certify(ScriptedClassifier{64 + 990}, Tensor(Shape{1}), p, 7, 0);
  EXPECT_EQ(r.id, 7u);
  EXPECT_EQ(r.k, 990u);
  EXPECT_EQ(r.counts[0] + r.counts[1], p.n);
  EXPECT_DOUBLE_EQ(r.p_lower, clopper_pearson_lower(990, 1000, 0.001));
  EXPECT_FALSE(r.abstain);
  EXPECT_DOUBLE_EQ(r.radius, 0.5 * inv_norm_cdf(r.p_lower));
  EXPECT_TRUE(r.correct());
}

TEST(Certify, RadiusPositiveExactlyWhenBoundExceedsHalf) {
  SmoothingParams p;
  p.n0 = 1;
  p.n = 200;
  for (std::size_t k = 90; k <= 140; ++k) {
    const auto r = certify(ScriptedClassifier{1 + k}, Tensor(Shape{1}), p);
    EXPECT_EQ(r.radius > 0.0, r.p_lower > 0.5) << k;
    EXPECT_EQ(r.abstain, !(r.p_lower > 0.5)) << k;
  }
}

TEST(Certify, ValidatesParameters) {
  SmoothingParams p;
  p.alpha = 0.0;
  EXPECT_THROW(certify(ScriptedClassifier{0}, Tensor(Shape{1}), p), ConfigError);
  p = SmoothingParams{};
  p.n = 0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = SmoothingParams{};
  p.sigma = 0.0;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Predict, ClearWinnerAndNearTie) {
  SmoothingParams p;
  p.n = 100;
  EXPECT_EQ(predict(ScriptedClassifier{100}, Tensor(Shape{1}), p).cls, 0);
  EXPECT_NEAR(predict(ScriptedClassifier{100}, Tensor(Shape{1}), p).p_value, std::ldexp(2.0, -100),
              1e-40);
  EXPECT_TRUE(predict(ScriptedClassifier{51}, Tensor(Shape{1}), p).abstain());
}

TEST(Predict, BoundaryAgreesWithExactBinomial) {
  const oracle::LogFactorials lf(100);
  std::size_t boundary = 0;
  for (std::size_t k = 50; k <= 100; ++k) {
    if (oracle::two_sided_p(k, 100 - k, lf) <= 0.001) {
      boundary = k;
      break;
    }
  }
  ASSERT_GT(boundary, 50u);
  SmoothingParams p;
  p.n = 100;
  EXPECT_TRUE(predict(ScriptedClassifier{boundary - 1}, Tensor(Shape{1}), p).abstain());
  EXPECT_EQ(predict(ScriptedClassifier{boundary}, Tensor(Shape{1}), p).cls, 0);
  for (std::size_t k = 50; k <= 100; ++k) {
    EXPECT_NEAR(binomial_two_sided_p(k, 100 - k), oracle::two_sided_p(k, 100 - k, lf), 1e-12);
  }
}

TEST(LinearOracle, BoundaryAndUnitMargin) {
  const std::vector<double> w{1.0, 0.0};
  const std::vector<double> on{0.0, 5.0};
  const auto o = linear_oracle(w, 0.0, on, 0.5);
  EXPECT_DOUBLE_EQ(o.probability, 0.5);
  EXPECT_DOUBLE_EQ(o.radius, 0.0);
  const double sigma = 0.37;
  const std::vector<double> x{sigma, 0.0};
  const auto u = linear_oracle(w, 0.0, x, sigma);
  EXPECT_NEAR(u.probability, static_cast<double>(oracle::normal_cdf(oracle::hp(1))), 1e-15);
  EXPECT_NEAR(u.probability, 0.84134, 1e-5);
  EXPECT_DOUBLE_EQ(u.radius, sigma);
  EXPECT_NEAR(sigma * inv_norm_cdf(u.probability), u.radius, 1e-12);
}

TEST(LinearOracle, ScaleInvariant) {
  const std::vector<double> w{0.3, -1.2, 2.0}, w10{3.0, -12.0, 20.0}, x{0.1, 0.4, -0.2};
  const auto a = linear_oracle(w, 0.2, x, 0.25), b = linear_oracle(w10, 2.0, x, 0.25);
  EXPECT_NEAR(a.probability, b.probability, 1e-14);
  EXPECT_NEAR(a.radius, b.radius, 1e-14);
  EXPECT_THROW(linear_oracle(std::vector<double>{0, 0}, 1.0, std::vector<double>{1, 1}, 1.0),
               NumericError);
}

TEST(LinearOracle, MonteCarloCountsMatchTheExactProbability) {
  const LinearCase c = linear_case(16, 0.3, 5);
  SmoothingParams p;
  p.sigma = 0.5;
  p.n = 20000;
  const auto r = certify(c.clf, c.x, p);
  const auto o = linear_oracle(c.clf.w, c.clf.b, c.xd, p.sigma);
  EXPECT_EQ(r.c_A, o.cls);
  const double se = std::sqrt(o.probability * (1 - o.probability) / p.n);
  EXPECT_NEAR(double(r.k) / p.n, o.probability, 4.5 * se);
}

TEST(Certify, CountsDoNotDependOnBatchOrThreads) {
  const LinearCase c = linear_case(8, 0.1, 2);
  SmoothingParams p;
  p.n = 1000;
  p.n0 = 37;
  p.seed = 11;
  p.batch = 256;
  const auto ref = certify(c.clf, c.x, p, 3);
  EXPECT_EQ(ref.counts[0] + ref.counts[1], p.n);
  for (const std::size_t batch : {1u, 7u, 64u, 100u, 5000u}) {
    p.batch = batch;
    const auto r = certify(c.clf, c.x, p, 3);
    EXPECT_EQ(r.counts, ref.counts) << batch;
    EXPECT_EQ(r.c_A, ref.c_A);
  }
  p.batch = 128;
  set_num_threads(3);
  const auto threaded = certify(c.clf, c.x, p, 3);
  set_num_threads(1);
  EXPECT_EQ(threaded.counts, ref.counts);
}

TEST(Certify, RadiusMonotoneInBoundAndLinearInSigma) {
  double prev = 0.0;
  for (double pl = 0.501; pl < 0.9999; pl += 0.0071) {
    const double r = inv_norm_cdf(pl);
    EXPECT_GT(r, prev);
    prev = r;
    EXPECT_NEAR(0.75 * inv_norm_cdf(pl), 3 * (0.25 * inv_norm_cdf(pl)), 1e-12);
  }
}

TEST(Certify, SmallSoundnessSample) {
  // 300 runs at alpha = 0.01; the expected number of unsound radii is 3 and
  // more than 10 would have probability below 1e-3.
  std::size_t unsound = 0, certified = 0;
  for (std::size_t run = 0; run < 300; ++run) {
    const LinearCase c = linear_case(16, 0.05 + 0.002 * double(run % 100), 100 + run);
    SmoothingParams p;
    p.n = 500;
    p.alpha = 0.01;
    p.seed = run;
    const auto r = certify(c.clf, c.x, p, run);
    const auto o = linear_oracle(c.clf.w, c.clf.b, c.xd, p.sigma);
    if (!r.abstain) {
      ++certified;
      unsound += r.c_A != o.cls || r.radius > o.radius;
    }
  }
  EXPECT_GT(certified, 100u);
  EXPECT_LE(unsound, 10u);
}

TEST(Certify, MeanRadiusGrowsWithSamples) {
  const LinearCase c = linear_case(16, 0.25 * inv_norm_cdf(0.9), 9);
  double prev = 0.0;
  for (const std::size_t n : {100u, 1000u, 10000u}) {
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      SmoothingParams p;
      p.n = n;
      p.seed = seed;
      total += certify(c.clf, c.x, p).radius;
    }
    EXPECT_GE(total / 20, prev) << n;
    prev = total / 20;
  }
}

TEST(CertifyCsv, RoundTrip) {
  CertificationResult a;
  a.id = 3;
  a.label = 1;
  a.c_A = 1;
  a.k = 9876;
  a.n = 10000;
  a.p_lower = clopper_pearson_lower(9876, 10000, 0.001);
  a.radius = 0.25 * inv_norm_cdf(a.p_lower);
  a.abstain = false;
  a.sigma = 0.25;
  a.seed = 18446744073709551615ull;
  const std::string csv = certification_csv({a});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "id,label,c_A,k,n,p_lower,radius,abstain,sigma,seed");
  std::istringstream in(csv);
  const auto back = parse_certification_csv(in, "mem");
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].p_lower, a.p_lower);
  EXPECT_EQ(back[0].radius, a.radius);
  EXPECT_EQ(back[0].seed, a.seed);
  EXPECT_EQ(certification_csv(back), csv);
  std::istringstream bad("id,label\n");
  EXPECT_THROW(parse_certification_csv(bad, "bad"), DataError);
}
