// Command-line front end: pretrain, finetune, certify, report, selftest.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "smoothcert/smoothcert.hpp"
#include "smoothcert/testing/gradient_suite.hpp"
#include "smoothcert/testing/oracles.hpp"

namespace sc = smoothcert;

namespace {

enum Exit { ok = 0, failure = 1, bad_config = 2, train_failed = 3, no_checkpoint = 4 };

struct Options {
  std::string config;
  int threads = 0;
  std::string out;
  std::vector<std::string> runs;
};

sc::ExperimentConfig load_config(const Options& opt) {
  sc::ExperimentConfig cfg = sc::ExperimentConfig::load(opt.config);
  if (!opt.out.empty()) cfg.output_dir = opt.out;
  if (opt.threads > 0) cfg.threads = opt.threads;
  if (cfg.threads > 0) sc::set_num_threads(cfg.threads);
  return cfg;
}

void print_report(const char* stage, const sc::StageResult& r) {
  for (const auto& rep : r.sweep) {
    std::printf("%s lr=%s final clean_acc=%s (%.1fs)\n", stage, sc::format_double(rep.base_lr).c_str(),
                rep.final_clean_acc() ? sc::format_double(*rep.final_clean_acc()).c_str() : "-",
                rep.wall_seconds);
  }
  std::printf("checkpoint: %s\n", r.report.checkpoint.c_str());
}

int cmd_pretrain(const Options& opt) {
  const auto cfg = load_config(opt);
  const auto tasks = sc::load_tasks(cfg);
  print_report("pretrain", sc::run_pretrain(cfg, tasks));
  return ok;
}

int cmd_finetune(const Options& opt) {
  const auto cfg = load_config(opt);
  const auto tasks = sc::load_tasks(cfg);
  print_report("finetune", sc::run_finetune(cfg, tasks));
  return ok;
}

int cmd_certify(const Options& opt) {
  const auto cfg = load_config(opt);
  const auto tasks = sc::load_tasks(cfg);
  const auto out = sc::run_certify(cfg, tasks);
  std::printf("clean accuracy %s\n", sc::format_double(*out.table.clean_acc).c_str());
  for (const auto& c : out.table.curves) {
    std::printf("sigma=%s certified@0=%s @0.25=%s @0.5=%s\n", sc::format_double(c.sigma).c_str(),
                sc::format_double(c.acc[0]).c_str(),
                sc::format_double(c.acc[out.table.index_of(0.25)]).c_str(),
                sc::format_double(c.acc[out.table.index_of(0.5)]).c_str());
  }
  std::printf("results in %s\n", cfg.output_dir.c_str());
  return ok;
}

int cmd_report(const Options& opt) {
  std::vector<std::filesystem::path> dirs(opt.runs.begin(), opt.runs.end());
  const auto out = sc::run_report(dirs, opt.out.empty() ? std::filesystem::path(".") : std::filesystem::path(opt.out));
  std::cout << out.text;
  return ok;
}

int cmd_selftest() {
  bool pass = true;
  double worst = 0.0;
  for (int i = 0; i <= 100; ++i) {
    const double p = std::pow(10.0, -10.0 + 0.097 * i);
    for (const double q : {p, 1.0 - p}) {
      worst = std::max(worst, std::fabs(sc::inv_norm_cdf(q) - sc::oracle::inv_norm_cdf(q)));
    }
  }
  std::printf("%-40s max abs err %.3g  %s\n", "inv_norm_cdf vs erf-series bisection", worst,
              worst < 1e-9 ? "PASS" : "FAIL");
  pass &= worst < 1e-9;

  const sc::oracle::LogFactorials lf(1000);
  double cp_worst = 0.0;
  for (const std::size_t n : {1u, 7u, 50u, 100u, 333u, 1000u}) {
    for (std::size_t k = 0; k <= n; k += std::max<std::size_t>(1, n / 25)) {
      cp_worst = std::max(cp_worst, std::fabs(sc::clopper_pearson_lower(k, n, 0.001) -
                                              sc::oracle::clopper_pearson_lower(k, n, 0.001, lf)));
    }
  }
  std::printf("%-40s max abs err %.3g  %s\n", "clopper_pearson_lower vs tail sums", cp_worst,
              cp_worst < 1e-9 ? "PASS" : "FAIL");
  pass &= cp_worst < 1e-9;

  double grad_worst = 0.0;
  for (const auto& r : sc::oracle::run_gradient_suite()) {
    grad_worst = std::max(grad_worst, r.max_rel_error);
    if (r.max_rel_error >= sc::oracle::kGradTolerance) {
      std::printf("  gradient %s rel err %.3g\n", r.name.c_str(), r.max_rel_error);
    }
  }
  std::printf("%-40s max rel err %.3g  %s\n", "layer gradients vs central differences",
              grad_worst, grad_worst < sc::oracle::kGradTolerance ? "PASS" : "FAIL");
  pass &= grad_worst < sc::oracle::kGradTolerance;
  return pass ? ok : failure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixed-noise pretraining, transfer and randomized-smoothing certification"};
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "experiment config (JSON)")->required();
    sub->add_option("--threads", opt.threads, "cap on worker threads");
    sub->add_option("--out", opt.out, "output directory (overrides output_dir)");
  };
  auto* pretrain = app.add_subcommand("pretrain", "mixed-noise pretraining");
  add_common(pretrain);
  auto* finetune = app.add_subcommand("finetune", "swap the head and fine-tune downstream");
  add_common(finetune);
  auto* certify = app.add_subcommand("certify", "certify the test split at each sigma");
  add_common(certify);
  auto* report = app.add_subcommand("report", "compare certified runs");
  report->add_option("runs", opt.runs, "run directories")->required();
  report->add_option("--out", opt.out, "where report files go");
  report->add_option("--threads", opt.threads, "cap on worker threads");
  auto* selftest = app.add_subcommand("selftest", "numerical oracle checks");
  selftest->add_option("--threads", opt.threads, "cap on worker threads");

  CLI11_PARSE(app, argc, argv);
  if (opt.threads > 0) sc::set_num_threads(opt.threads);

  try {
    if (*pretrain) return cmd_pretrain(opt);
    if (*finetune) return cmd_finetune(opt);
    if (*certify) return cmd_certify(opt);
    if (*report) return cmd_report(opt);
    if (*selftest) return cmd_selftest();
  } catch (const sc::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return bad_config;
  } catch (const sc::TrainingDiverged& e) {
    std::fprintf(stderr, "training failed: %s\n", e.what());
    return train_failed;
  } catch (const sc::MissingCheckpoint& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return no_checkpoint;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return failure;
  }
  return failure;
}
