#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "smoothcert/data.hpp"
#include "smoothcert/error.hpp"
#include "smoothcert/format.hpp"
#include "smoothcert/model.hpp"
#include "smoothcert/parallel.hpp"
#include "smoothcert/random.hpp"
#include "smoothcert/stats.hpp"
#include "smoothcert/tensor.hpp"

namespace smoothcert {

struct SmoothingParams {
  double sigma = 0.25;
  std::size_t n0 = 100;
  std::size_t n = 10000;
  double alpha = 0.001;
  std::size_t batch = 256;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) {
      throw ConfigError("certify.sigma", "must be positive");
    }
    if (n0 < 1) throw ConfigError("certify.n0", "must be at least 1");
    if (n < 1) throw ConfigError("certify.n", "must be at least 1");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("certify.alpha", "must lie in (0, 1)");
    if (batch < 1) throw ConfigError("certify.batch", "must be at least 1");
  }
};

struct CertificationResult {
  std::size_t id = 0;
  int label = -1;  // -1 when the true label is unknown
  int c_A = 0;
  std::size_t k = 0;
  std::size_t n = 0;
  double p_lower = 0.0;
  double radius = 0.0;  // 0 when abstaining
  bool abstain = true;
  std::vector<std::size_t> counts;  // estimation-phase tallies per class
  double sigma = 0.0;
  std::uint64_t seed = 0;

  bool correct() const { return !abstain && c_A == label; }
};

struct Prediction {
  int cls = -1;  // -1 = abstain
  double p_value = 1.0;
  std::vector<std::size_t> counts;

  bool abstain() const { return cls < 0; }
};

// Noise samples are generated in fixed blocks, each from its own stream
// keyed by (seed, input id, phase, block). Tallies therefore do not depend on
// the batch size or on how blocks are spread across threads.
inline constexpr std::size_t kNoiseBlock = 64;

enum class McPhase : std::uint64_t { select = 0, estimate = 1, predict = 2 };

// Base classifier for sign(w . x + b): class 1 on the positive side.
struct LinearClassifier {
  std::vector<double> w;
  double b = 0.0;

  std::size_t num_classes() const { return 2; }

  std::vector<int> classify(const Tensor& batch) const {
    const std::size_t m = batch.size() / batch.dim(0);
    if (m != w.size()) {
      throw ShapeError("linear classifier expects " + std::to_string(w.size()) +
                       " features, got " + std::to_string(m));
    }
    std::vector<int> out(batch.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) {
      const float* x = batch.ptr() + i * m;
      double z = b;
      for (std::size_t j = 0; j < m; ++j) z += w[j] * x[j];
      out[i] = z > 0.0 ? 1 : 0;
    }
    return out;
  }
};

struct LinearOracle {
  double probability = 0.5;  // smoothed probability of the top class
  double radius = 0.0;       // true l2 distance to the decision boundary
  int cls = 0;
};

inline LinearOracle linear_oracle(std::span<const double> w, double b,
                                  std::span<const double> x, double sigma) {
  if (w.size() != x.size()) throw ShapeError("linear_oracle: w and x differ in length");
  if (!(sigma > 0.0)) throw NumericError("linear_oracle: sigma must be positive");
  double norm2 = 0.0, margin = b;
  for (std::size_t i = 0; i < w.size(); ++i) {
    norm2 += w[i] * w[i];
    margin += w[i] * x[i];
  }
  if (norm2 == 0.0) throw NumericError("linear_oracle: w must be non-zero");
  const double norm = std::sqrt(norm2);
  const double dist = std::fabs(margin) / norm;
  return {normal_cdf(dist / sigma), dist, margin > 0.0 ? 1 : 0};
}

namespace detail {

template <typename Classifier>
std::vector<std::size_t> tally(const Classifier& clf, const Tensor& x, std::size_t num,
                               McPhase phase, std::size_t id, const SmoothingParams& p) {
  const std::size_t m = x.size();
  const std::size_t k = clf.num_classes();
  std::vector<std::size_t> counts(k, 0);
  const std::size_t blocks_per_batch =
      std::max<std::size_t>(1, (p.batch + kNoiseBlock - 1) / kNoiseBlock);
  Shape shape = x.shape();
  shape.insert(shape.begin(), 1);

  for (std::size_t done = 0; done < num;) {
    const std::size_t first_block = done / kNoiseBlock;
    const std::size_t count = std::min(num - done, blocks_per_batch * kNoiseBlock);
    shape[0] = count;
    Tensor noisy(shape);
    const std::size_t nblocks = (count + kNoiseBlock - 1) / kNoiseBlock;
    parallel_for(nblocks, [&](std::size_t bi) {
      Rng rng = Rng::stream(p.seed, id, static_cast<std::uint64_t>(phase), first_block + bi);
      const std::size_t lo = bi * kNoiseBlock;
      const std::size_t hi = std::min(count, lo + kNoiseBlock);
      for (std::size_t s = lo; s < hi; ++s) {
        float* out = noisy.ptr() + s * m;
        for (std::size_t j = 0; j < m; ++j) {
          out[j] = static_cast<float>(x[j] + p.sigma * rng.normal());
        }
      }
    });
    for (const int c : clf.classify(noisy)) {
      if (c < 0 || static_cast<std::size_t>(c) >= k) {
        throw Error("base classifier returned class " + std::to_string(c));
      }
      ++counts[static_cast<std::size_t>(c)];
    }
    done += count;
  }
  return counts;
}

inline std::size_t argmax(const std::vector<std::size_t>& counts) {
  return static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) -
                                  counts.begin());
}

}  // namespace detail

// Smoothed classification with a certificate. Selection and estimation use
// independent noise, so the bound on p_A is not biased by picking c_A.
template <typename Classifier>
CertificationResult certify(const Classifier& clf, const Tensor& x,
                            const SmoothingParams& params, std::size_t id = 0,
                            int label = -1) {
  params.validate();
  const auto select = detail::tally(clf, x, params.n0, McPhase::select, id, params);
  const std::size_t top = detail::argmax(select);
  auto counts = detail::tally(clf, x, params.n, McPhase::estimate, id, params);

  CertificationResult r;
  r.id = id;
  r.label = label;
  r.c_A = static_cast<int>(top);
  r.k = counts[top];
  r.n = params.n;
  r.counts = std::move(counts);
  r.p_lower = clopper_pearson_lower(r.k, r.n, params.alpha);
  r.abstain = !(r.p_lower > 0.5);
  r.radius = r.abstain ? 0.0 : params.sigma * inv_norm_cdf(r.p_lower);
  r.sigma = params.sigma;
  r.seed = params.seed;
  return r;
}

// Smoothed prediction without a radius: abstains unless the top class beats
// the runner-up under an exact two-sided binomial test at level alpha.
template <typename Classifier>
Prediction predict(const Classifier& clf, const Tensor& x, const SmoothingParams& params,
                   std::size_t id = 0) {
  params.validate();
  Prediction out;
  out.counts = detail::tally(clf, x, params.n, McPhase::predict, id, params);
  std::vector<std::size_t> order(out.counts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return out.counts[a] > out.counts[b];
  });
  const std::size_t na = out.counts[order[0]];
  const std::size_t nb = order.size() > 1 ? out.counts[order[1]] : 0;
  out.p_value = binomial_two_sided_p(na, nb);
  if (out.p_value <= params.alpha) out.cls = static_cast<int>(order[0]);
  return out;
}

// Adapter so a Model can serve as the base classifier.
template <typename T>
struct ModelClassifier {
  const Model<T>& model;

  std::size_t num_classes() const { return model.num_classes(); }
  std::vector<int> classify(const Tensor& batch) const {
    if constexpr (std::is_same_v<T, float>) {
      return model.classify(batch);
    } else {
      return model.classify(batch.template cast<T>());
    }
  }
};

// Certifies the first `max_inputs` samples (all when 0), one input per task.
template <typename T>
std::vector<CertificationResult> certify_dataset(const Model<T>& model, const Dataset& ds,
                                                 const SmoothingParams& params,
                                                 std::size_t max_inputs = 0) {
  params.validate();
  const std::size_t count = max_inputs ? std::min(max_inputs, ds.size()) : ds.size();
  std::vector<CertificationResult> out(count);
  const ModelClassifier<T> clf{model};
  const std::size_t m = ds.sample_numel();
  const Shape shape = ds.sample_shape();
  parallel_for(count, [&](std::size_t i) {
    Tensor x(shape, std::vector<float>(ds.images.ptr() + i * m, ds.images.ptr() + (i + 1) * m));
    out[i] = certify(clf, x, params, i, ds.labels[i]);
  });
  return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline constexpr std::string_view kCertifyCsvHeader =
    "id,label,c_A,k,n,p_lower,radius,abstain,sigma,seed";

inline std::string certification_csv(const std::vector<CertificationResult>& rows) {
  std::ostringstream os;
  os << kCertifyCsvHeader << '\n';
  for (const auto& r : rows) {
    os << r.id << ',' << r.label << ',' << r.c_A << ',' << r.k << ',' << r.n << ','
       << format_double(r.p_lower) << ',' << format_double(r.radius) << ','
       << (r.abstain ? 1 : 0) << ',' << format_double(r.sigma) << ',' << r.seed << '\n';
  }
  return os.str();
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (const char ch : line) {
    if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

template <typename I>
I parse_int(const std::string& s, const std::string& where) {
  I v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw DataError(where + ": bad integer '" + s + "'");
  }
  return v;
}

}  // namespace detail

// Parses the per-input CSV back; counts are not part of the format.
inline std::vector<CertificationResult> parse_certification_csv(std::istream& in,
                                                                const std::string& source) {
  std::string line;
  if (!std::getline(in, line) || detail::split_csv_line(line) !=
                                     detail::split_csv_line(std::string(kCertifyCsvHeader))) {
    throw DataError(source + ": missing or unexpected header");
  }
  std::vector<CertificationResult> rows;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    const std::string where = source + ":" + std::to_string(lineno);
    if (f.size() != 10) throw DataError(where + ": expected 10 fields");
    CertificationResult r;
    r.id = detail::parse_int<std::size_t>(f[0], where);
    r.label = detail::parse_int<int>(f[1], where);
    r.c_A = detail::parse_int<int>(f[2], where);
    r.k = detail::parse_int<std::size_t>(f[3], where);
    r.n = detail::parse_int<std::size_t>(f[4], where);
    r.p_lower = parse_double(f[5]);
    r.radius = parse_double(f[6]);
    r.abstain = detail::parse_int<int>(f[7], where) != 0;
    r.sigma = parse_double(f[8]);
    r.seed = detail::parse_int<std::uint64_t>(f[9], where);
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<CertificationResult> read_certification_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open");
  return parse_certification_csv(in, path);
}

}  // namespace smoothcert
