// Acceptance run: numerical oracles, certification soundness, the transfer
// experiments on the synthetic shapes split, report integrity and
// reproducibility. Prints one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "smoothcert/smoothcert.hpp"
#include "smoothcert/testing/gradient_suite.hpp"
#include "smoothcert/testing/oracles.hpp"
#include "smoothcert/testing/recount.hpp"

namespace sc = smoothcert;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Numerical oracles
// ---------------------------------------------------------------------------

Verdict numerical_oracles() {
  std::ostringstream d;
  bool pass = true;

  double phi_err = 0.0;
  std::vector<double> ps;
  for (int i = 0; i <= 400; ++i) ps.push_back(std::pow(10.0, -10.0 + 9.69897 * i / 400.0));
  for (int i = 1; i < 100; ++i) ps.push_back(i / 100.0);
  for (const double p : ps) {
    for (const double q : {p, 1.0 - p}) {
      phi_err = std::max(phi_err, std::fabs(sc::inv_norm_cdf(q) - sc::oracle::inv_norm_cdf(q)));
    }
  }
  const auto t0 = Clock::now();
  double sink = 0.0;
  for (int i = 0; i < 1000000; ++i) sink += sc::inv_norm_cdf((i + 0.5) / 1e6);
  const double phi_secs = seconds_since(t0);
  pass &= phi_err < 1e-9 && phi_secs < 1.0;
  d << "inv_norm_cdf max err " << fmt("%.2e", phi_err) << " over " << 2 * ps.size()
    << " points, 1e6 calls " << fmt("%.3f", phi_secs) << " s (checksum " << fmt("%.3g", sink)
    << "); ";

  // Each bound p must bracket the exact tail: P[Bin(n, p - 1e-9) >= k] < alpha
  // <= P[Bin(n, p + 1e-9) >= k], so the true bound lies within 1e-9 of p.
  const double alpha = 0.001;
  const sc::oracle::LogFactorials lf(1000);
  std::size_t cp_bad = 0, cp_checked = 0;
  double closed_err = 0.0;
  for (std::size_t n = 1; n <= 1000; ++n) {
    for (std::size_t k = 1; k <= n; ++k) {
      const double p = sc::clopper_pearson_lower(k, n, alpha);
      const double below = sc::oracle::binomial_tail(k, n, std::max(0.0, p - 1e-9), lf);
      const double above = sc::oracle::binomial_tail(k, n, std::min(1.0, p + 1e-9), lf);
      cp_bad += !(below < alpha && alpha <= above);
      ++cp_checked;
    }
    closed_err = std::max(closed_err, std::fabs(sc::clopper_pearson_lower(n, n, alpha) -
                                                std::pow(alpha, 1.0 / double(n))));
    cp_bad += sc::clopper_pearson_lower(0, n, alpha) != 0.0;
  }
  pass &= cp_bad == 0 && closed_err == 0.0;
  d << "clopper-pearson " << cp_checked - cp_bad << "/" << cp_checked
    << " bracketed to 1e-9, k=n closed form err " << closed_err << "; ";

  const auto t1 = Clock::now();
  double grad = 0.0;
  std::size_t layers = 0;
  for (const auto& r : sc::oracle::run_gradient_suite()) {
    grad = std::max(grad, r.max_rel_error);
    ++layers;
  }
  const double grad_secs = seconds_since(t1);
  pass &= grad < 1e-4 && grad_secs < 60.0;
  d << "gradients max rel err " << fmt("%.2e", grad) << " over " << layers << " tensors in "
    << fmt("%.1f", grad_secs) << " s";
  return {1, "numerical oracles", pass, d.str()};
}

// ---------------------------------------------------------------------------
// 2. Certification soundness on the linear classifier
// ---------------------------------------------------------------------------

struct LinearInput {
  sc::LinearClassifier clf;
  sc::Tensor x;
  std::vector<double> xd;
};

// sign(w.x + b) in d dimensions with x at signed margin `dist` from the plane.
LinearInput linear_input(std::size_t d, double dist, std::uint64_t seed) {
  sc::Rng rng(seed);
  LinearInput c;
  c.clf.w.resize(d);
  double norm = 0.0;
  for (double& v : c.clf.w) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  c.clf.b = rng.normal() * 0.1;
  c.x = sc::Tensor(sc::Shape{d});
  for (std::size_t i = 0; i < d; ++i) {
    c.x[i] = static_cast<float>(c.clf.w[i] / norm * (dist - c.clf.b / norm) + 0.05 * rng.normal());
  }
  for (std::size_t i = 0; i < d; ++i) c.xd.push_back(c.x[i]);
  return c;
}

Verdict soundness() {
  const auto t0 = Clock::now();
  const double sigma = 0.25;
  const std::size_t calls = 2000;
  std::size_t certified = 0, unsound = 0;
  for (std::size_t i = 0; i < calls; ++i) {
    // True top-class probabilities spread over (0.5, 0.9995).
    const double p_true = 0.5 + 0.4995 * (static_cast<double>(i) + 0.5) / calls;
    const LinearInput c = linear_input(16, sigma * sc::inv_norm_cdf(p_true), 1000 + i);
    sc::SmoothingParams p;
    p.sigma = sigma;
    p.n0 = 100;
    p.n = 10000;
    p.alpha = 0.001;
    p.seed = 77 + i;
    const auto r = sc::certify(c.clf, c.x, p, i);
    const auto o = sc::linear_oracle(c.clf.w, c.clf.b, c.xd, sigma);
    if (!r.abstain) {
      ++certified;
      unsound += r.c_A != o.cls || r.radius > o.radius;
    }
  }
  // Largest count still consistent with a rate of alpha at 99% confidence.
  const sc::oracle::LogFactorials lf(calls);
  std::size_t slack = 0;
  while (sc::oracle::binomial_tail(slack + 1, certified, 0.001, lf) > 0.01) ++slack;
  bool pass = unsound <= slack;
  std::ostringstream d;
  d << unsound << " unsound of " << certified << " certified (allowed " << slack << "); ";

  const double target_p = 0.9;
  const LinearInput c = linear_input(16, sigma * sc::inv_norm_cdf(target_p), 5);
  const double truth = sc::linear_oracle(c.clf.w, c.clf.b, c.xd, sigma).probability;
  const double expected = sigma * sc::inv_norm_cdf(truth);
  double total = 0.0;
  const int reps = 20;
  for (int s = 0; s < reps; ++s) {
    sc::SmoothingParams p;
    p.sigma = sigma;
    p.n = 100000;
    p.seed = 900 + static_cast<std::uint64_t>(s);
    total += sc::certify(c.clf, c.x, p).radius;
  }
  const double mean = total / reps;
  const double rel = std::fabs(mean - expected) / expected;
  pass &= rel <= 0.05;
  d << "mean radius at p=" << fmt("%.4f", truth) << " n=1e5: " << fmt("%.4f", mean) << " vs "
    << fmt("%.4f", expected) << " (" << fmt("%.2f", 100 * rel) << "% off), "
    << fmt("%.0f", seconds_since(t0)) << " s";
  return {2, "certification soundness", pass, d.str()};
}

// ---------------------------------------------------------------------------
// 3-6. Transfer experiments
// ---------------------------------------------------------------------------

// Shared protocol: 8 upstream and 3 downstream synth classes, 16x16 images,
// the three-rate sweep in both stages, 50 downstream training images per class.
json base_config() {
  return json::parse(R"({
    "seed": 1,
    "threads": 0,
    "data": {"source": "synth", "num_classes": 11, "train_per_class": 200,
             "test_per_class": 30, "size": 16,
             "upstream_classes": [0, 1, 2, 3, 4, 5, 6, 7],
             "downstream_classes": [8, 9, 10], "downstream_train_per_class": 50},
    "model": {"channels": [8, 16], "norm": "layer"},
    "pretrain": {"epochs": 30, "eval_every": 10, "lr_sweep": [0.1, 0.01, 0.001],
                 "noise": {"sigmas": [0, 0.25, 0.5, 1.0]},
                 "sgd": {"base_lr": 0.1, "warmup_epochs": 3, "batch_size": 128}},
    "finetune": {"epochs": 10, "eval_every": 10, "mode": "full_network",
                 "lr_sweep": [0.1, 0.01, 0.001],
                 "sgd": {"base_lr": 0.01, "warmup_epochs": 1, "batch_size": 8}},
    "certify": {"sigmas": [0.25], "n0": 100, "n": 10000, "alpha": 0.001, "batch": 64}
  })");
}

struct Arm {
  std::string name;
  json config;
  std::vector<std::string> stages;
};

struct ArmResult {
  double clean = 0.0;
  double cert = 0.0;  // sigma = 0.25 curve at eps = 0.25
  fs::path dir;
};

ArmResult run_arm(const Arm& arm, const fs::path& dir) {
  const auto t0 = Clock::now();
  fs::remove_all(dir);
  json js = arm.config;
  js["output_dir"] = dir.string();
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << js.dump(2) << '\n';
  const sc::ExperimentConfig cfg = sc::ExperimentConfig::from_json(js);
  if (cfg.threads > 0) sc::set_num_threads(cfg.threads);
  const sc::Tasks tasks = sc::load_tasks(cfg);
  std::optional<sc::CertifyOutput> out;
  for (const auto& stage : arm.stages) {
    if (stage == "pretrain") sc::run_pretrain(cfg, tasks);
    if (stage == "finetune") sc::run_finetune(cfg, tasks);
    if (stage == "certify") out = sc::run_certify(cfg, tasks);
  }
  ArmResult r;
  r.dir = dir;
  r.clean = out->table.clean_acc.value_or(0.0);
  r.cert = out->table.curve_for(0.25).acc[out->table.index_of(0.25)];
  std::printf("  %-16s clean %.3f  certified@0.25 %.3f  (%.0f s)\n", arm.name.c_str(), r.clean,
              r.cert, seconds_since(t0));
  std::fflush(stdout);
  return r;
}

std::vector<Arm> arms(const fs::path& work) {
  std::vector<Arm> out;
  const json base = base_config();

  json a = base;
  a["certify"]["sigmas"] = {0.25, 0.5};
  out.push_back({"mixed", a, {"pretrain", "finetune", "certify"}});

  json b = a;
  b["pretrain"]["noise"] = {{"sigmas", {0}}};
  out.push_back({"clean", b, {"pretrain", "finetune", "certify"}});

  // One clean epoch from the mixed arm's pretrained checkpoint.
  json star = base;
  star["finetune"]["epochs"] = 1;
  star["finetune"]["eval_every"] = 1;
  star["finetune"]["sgd"]["warmup_epochs"] = 0.1;
  star["finetune"]["checkpoint"] = (work / "mixed" / "pretrain.ckpt").string();
  out.push_back({"mixed_star", star, {"finetune", "certify"}});

  for (const auto& [norm, groups] : std::vector<std::pair<std::string, int>>{
           {"batch", 0}, {"group", 4}, {"instance", 0}}) {
    json n = base;
    n["model"]["norm"] = norm;
    n["model"]["groups"] = groups;
    out.push_back({"norm_" + norm, n, {"pretrain", "finetune", "certify"}});
  }

  // Training from scratch on the downstream task at the fine-tuning batch size.
  for (const auto& [name, sigma] :
       std::vector<std::pair<std::string, double>>{{"scratch_clean", 0.0}, {"scratch_025", 0.25}}) {
    json s = base;
    s["pretrain"]["task"] = "downstream";
    s["pretrain"]["noise"] = {{"sigmas", {sigma}}};
    s["pretrain"]["sgd"]["batch_size"] = 8;
    out.push_back({name, s, {"pretrain", "certify"}});
  }
  return out;
}

std::string pts(double v) { return fmt("%.1f", 100.0 * v); }

// ---------------------------------------------------------------------------
// 8. Reproducibility
// ---------------------------------------------------------------------------

std::vector<std::string> compare_csvs(const fs::path& a, const fs::path& b) {
  std::vector<std::string> bad;
  std::size_t seen = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    if (e.path().extension() != ".csv") continue;
    ++seen;
    const fs::path other = b / e.path().filename();
    if (!fs::exists(other) || sc::read_text(e.path()) != sc::read_text(other)) {
      bad.push_back(e.path().filename().string());
    }
  }
  if (seen == 0) bad.push_back("no CSV files in " + a.string());
  return bad;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"smoothcert acceptance run"};
  std::string work = "acceptance_runs";
  bool strict = false;
  app.add_option("--work", work, "directory for experiment outputs");
  app.add_flag("--strict", strict, "exit non-zero when any criterion fails");
  CLI11_PARSE(app, argc, argv);

  std::setvbuf(stdout, nullptr, _IOLBF, 0);
  const auto start = Clock::now();
  std::vector<Verdict> verdicts;
  try {
    std::printf("criterion 1: numerical oracles\n");
    verdicts.push_back(numerical_oracles());
    std::printf("criterion 2: certification soundness\n");
    verdicts.push_back(soundness());

    std::printf("criteria 3-6: transfer experiments\n");
    const fs::path root(work);
    std::map<std::string, ArmResult> r;
    const auto plan = arms(root);
    for (const Arm& arm : plan) r[arm.name] = run_arm(arm, root / arm.name);

    const double chance = 1.0 / 3.0;
    {
      const auto& a = r["mixed"];
      const auto& b = r["clean"];
      const bool pass = a.cert >= 4.0 * b.cert && b.cert <= 1.5 * chance &&
                        std::fabs(a.clean - b.clean) <= 0.03;
      verdicts.push_back({3, "robustness transfers from mixed pretraining", pass,
                          "certified " + pts(a.cert) + " vs " + pts(b.cert) + " (need >= 4x, clean arm <= " +
                              pts(1.5 * chance) + "); clean " + pts(a.clean) + " vs " + pts(b.clean) +
                              " (need within 3 points)"});
    }
    {
      const auto& s = r["mixed_star"];
      const auto& a = r["mixed"];
      const bool pass = s.cert >= 0.8 * a.cert;
      verdicts.push_back({4, "one-epoch fine-tuning keeps robustness", pass,
                          "certified " + pts(s.cert) + " vs full " + pts(a.cert) + " (need >= 80%)"});
    }
    {
      const auto& ln = r["mixed"];
      const auto& bn = r["norm_batch"];
      const auto& gn = r["norm_group"];
      const auto& in = r["norm_instance"];
      const bool pass = ln.cert >= 3.0 * bn.cert && std::fabs(ln.clean - bn.clean) <= 0.02 &&
                        std::fabs(gn.cert - ln.cert) <= 0.15 && std::fabs(in.cert - ln.cert) <= 0.15;
      verdicts.push_back({5, "batch norm breaks the transfer", pass,
                          "layer " + pts(ln.cert) + " vs batch " + pts(bn.cert) +
                              " certified (need >= 3x); clean " + pts(ln.clean) + " vs " + pts(bn.clean) +
                              " (need within 2); group " + pts(gn.cert) + ", instance " + pts(in.cert) +
                              " (need within 15 of layer)"});
    }
    {
      const auto& g = r["scratch_clean"];
      const auto& h = r["scratch_025"];
      const auto& s = r["mixed_star"];
      const bool pass = g.cert <= 1.5 * chance && s.clean - h.clean >= 0.05;
      verdicts.push_back({6, "pretraining beats training from scratch", pass,
                          "scratch clean certified " + pts(g.cert) + " (need <= " + pts(1.5 * chance) +
                              "); one-epoch clean " + pts(s.clean) + " vs scratch sigma=0.25 " +
                              pts(h.clean) + " (need >= 5 points)"});
    }

    std::printf("criterion 7: reporting integrity\n");
    {
      std::vector<std::string> bad;
      std::vector<fs::path> dirs;
      std::map<std::string, fs::path> named;
      for (const Arm& arm : plan) {
        for (const auto& m : sc::oracle::verify_run(r[arm.name].dir)) bad.push_back(arm.name + ": " + m);
        dirs.push_back(r[arm.name].dir);
        named[arm.name] = r[arm.name].dir;
      }
      const fs::path report_dir = root / "report";
      const auto report = sc::run_report(dirs, report_dir);
      std::printf("%s", report.text.c_str());
      for (const auto& m : sc::oracle::verify_report(report_dir / "report.csv", named)) bad.push_back(m);
      verdicts.push_back({7, "reporting integrity", bad.empty(),
                          bad.empty() ? std::to_string(dirs.size()) +
                                            " runs and the comparison table match the recount"
                                      : bad.front() + " (" + std::to_string(bad.size()) + " issues)"});
    }

    std::printf("criterion 8: reproducibility\n");
    {
      std::vector<std::string> bad;
      for (const Arm& arm : plan) {
        if (arm.name != "mixed_star" && arm.name != "scratch_025") continue;
        const ArmResult again = run_arm(arm, root / (arm.name + "_rerun"));
        for (const auto& f : compare_csvs(r[arm.name].dir, again.dir)) bad.push_back(arm.name + "/" + f);
      }
      verdicts.push_back({8, "reproducibility", bad.empty(),
                          bad.empty() ? "reruns of mixed_star and scratch_025 match byte for byte"
                                      : "differs: " + bad.front()});
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance aborted: %s\n", e.what());
    return 1;
  }

  std::printf("\n");
  bool all = true;
  for (const auto& v : verdicts) {
    std::printf("%s criterion %d (%s): %s\n", v.pass ? "PASS" : "FAIL", v.id, v.name.c_str(),
                v.detail.c_str());
    all &= v.pass;
  }
  std::printf("total %.0f s\n", seconds_since(start));
  return strict && !all ? 1 : 0;
}
