#pragma once

#include <filesystem>
#include <numeric>
#include <optional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "smoothcert/certify.hpp"
#include "smoothcert/checkpoint.hpp"
#include "smoothcert/config.hpp"
#include "smoothcert/data.hpp"
#include "smoothcert/model.hpp"
#include "smoothcert/report.hpp"
#include "smoothcert/trainer.hpp"

namespace smoothcert {

struct TaskData {
  Dataset train;
  Dataset test;
};

struct Tasks {
  TaskData upstream;
  TaskData downstream;

  const TaskData& get(const std::string& name) const {
    return name == "downstream" ? downstream : upstream;
  }
};

inline Tasks load_tasks(const ExperimentConfig& cfg) {
  const DataConfig& d = cfg.data;
  Dataset train, test;
  if (d.source == "idx") {
    train = load_idx(d.train_images, idx_label_path(d.train_images), Split::train, d.num_classes);
    test = load_idx(d.test_images, idx_label_path(d.test_images), Split::test, d.num_classes);
  } else {
    train = synth_shapes({d.num_classes, d.train_per_class, d.size,
                          cfg.derived_seed(SeedTag::data_train), Split::train});
    test = synth_shapes({d.num_classes, d.test_per_class, d.size,
                         cfg.derived_seed(SeedTag::data_test), Split::test});
  }
  Tasks tasks;
  if (d.upstream_classes.empty()) {
    tasks = {{train, test}, {train, test}};
  } else {
    const std::uint64_t s = cfg.derived_seed(SeedTag::split);
    auto [up_train, down_train] =
        make_transfer_pair(train, d.upstream_classes, d.downstream_classes, s);
    auto [up_test, down_test] = make_transfer_pair(test, d.upstream_classes, d.downstream_classes, s);
    tasks = {{std::move(up_train), std::move(up_test)},
             {std::move(down_train), std::move(down_test)}};
  }
  if (d.downstream_train_per_class) {
    tasks.downstream.train = limit_per_class(tasks.downstream.train, d.downstream_train_per_class);
  }
  return tasks;
}

inline ModelSpec model_spec_for(const ExperimentConfig& cfg, const Dataset& ds) {
  ConvNetOptions opt;
  opt.in_channels = ds.images.dim(1);
  opt.size = ds.images.dim(2);
  if (ds.images.dim(3) != opt.size) throw DataError("images must be square");
  opt.channels = cfg.model.channels;
  opt.norm = cfg.model.norm;
  opt.groups = cfg.model.groups;
  opt.norm_momentum = cfg.model.norm_momentum;
  opt.num_classes = ds.num_classes;
  return make_convnet(opt);
}

struct StageResult {
  Model<float> model;
  TrainReport report;              // the selected run
  std::vector<TrainReport> sweep;  // every run of the lr sweep, in order
};

namespace detail {

inline std::filesystem::path ensure_dir(const std::string& dir) {
  std::filesystem::path p(dir);
  std::filesystem::create_directories(p);
  return p;
}

// Runs `train` once per learning rate (or once when the sweep is empty) from
// the same starting model; keeps the run with the best final clean accuracy.
template <typename Train>
StageResult sweep_runs(const Model<float>& start, const StageConfig& st, Train&& train) {
  std::vector<double> rates = st.lr_sweep;
  if (rates.empty()) rates.push_back(st.sgd.base_lr);
  std::optional<StageResult> best;
  std::vector<TrainReport> all;
  for (const double lr : rates) {
    Model<float> model = start;
    SgdConfig sgd = st.sgd;
    sgd.base_lr = lr;
    TrainReport rep = train(model, sgd);
    all.push_back(rep);
    const double acc = rep.final_clean_acc().value_or(0.0);
    if (!best || acc > best->report.final_clean_acc().value_or(0.0)) {
      best = StageResult{std::move(model), rep, {}};
    }
  }
  best->sweep = std::move(all);
  return std::move(*best);
}

inline void write_stage_reports(const std::filesystem::path& dir, const std::string& stage,
                                const StageResult& r) {
  write_text(dir / (stage + "_report.csv"), r.report.to_csv());
  if (r.sweep.size() > 1) {
    for (const TrainReport& rep : r.sweep) {
      write_text(dir / (stage + "_report_lr_" + format_double(rep.base_lr) + ".csv"),
                 rep.to_csv());
    }
  }
}

inline Model<float> load_existing(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw MissingCheckpoint(path.string() + ": checkpoint not found");
  }
  return load_checkpoint(path);
}

}  // namespace detail

inline std::filesystem::path pretrain_checkpoint_path(const ExperimentConfig& cfg) {
  return std::filesystem::path(cfg.output_dir) / "pretrain.ckpt";
}

inline std::filesystem::path finetune_checkpoint_path(const ExperimentConfig& cfg) {
  return std::filesystem::path(cfg.output_dir) / "finetune.ckpt";
}

inline StageResult run_pretrain(const ExperimentConfig& cfg, const Tasks& tasks) {
  if (!cfg.pretrain.present) throw ConfigError("pretrain", "section is missing");
  const TaskData& task = tasks.get(cfg.pretrain.task);
  Model<float> start(model_spec_for(cfg, task.train));
  start.init_parameters(cfg.derived_seed(SeedTag::init));
  TrainPlan plan;
  plan.stage = Stage::pretrain;
  plan.seed = cfg.pretrain_seed();
  plan.noise = {cfg.pretrain.sigmas, cfg.pretrain.weights, derive_seed({plan.seed, 1})};
  plan.eval_every = cfg.pretrain.eval_every;
  plan.freeze_norm_stats = cfg.pretrain.freeze_norm_stats;
  StageResult r = detail::sweep_runs(start, cfg.pretrain, [&](Model<float>& m, SgdConfig sgd) {
    TrainPlan p = plan;
    p.sgd = sgd;
    return pretrain(m, task.train, &task.test, p);
  });
  const auto dir = detail::ensure_dir(cfg.output_dir);
  save_checkpoint(r.model, pretrain_checkpoint_path(cfg));
  r.report.checkpoint = pretrain_checkpoint_path(cfg).string();
  detail::write_stage_reports(dir, "pretrain", r);
  return r;
}

inline StageResult run_finetune(const ExperimentConfig& cfg, const Tasks& tasks) {
  if (!cfg.finetune.present) throw ConfigError("finetune", "section is missing");
  const std::filesystem::path source = cfg.finetune.checkpoint.empty()
                                           ? pretrain_checkpoint_path(cfg)
                                           : std::filesystem::path(cfg.finetune.checkpoint);
  const Model<float> pretrained = detail::load_existing(source);
  const TaskData& task = tasks.downstream;
  const Model<float> start =
      swap_head(pretrained, task.train.num_classes, cfg.derived_seed(SeedTag::head));
  TrainPlan plan;
  plan.stage = Stage::finetune;
  plan.mode = cfg.finetune.mode;
  plan.seed = cfg.finetune_seed();
  plan.noise = {cfg.finetune.sigmas, cfg.finetune.weights, derive_seed({plan.seed, 1})};
  plan.allow_noisy_finetune = cfg.finetune.allow_noisy;
  plan.eval_every = cfg.finetune.eval_every;
  plan.freeze_norm_stats = cfg.finetune.freeze_norm_stats;
  StageResult r = detail::sweep_runs(start, cfg.finetune, [&](Model<float>& m, SgdConfig sgd) {
    TrainPlan p = plan;
    p.sgd = sgd;
    return finetune(m, task.train, &task.test, p);
  });
  const auto dir = detail::ensure_dir(cfg.output_dir);
  save_checkpoint(r.model, finetune_checkpoint_path(cfg));
  r.report.checkpoint = finetune_checkpoint_path(cfg).string();
  detail::write_stage_reports(dir, "finetune", r);
  return r;
}

struct CertifyOutput {
  std::map<double, std::vector<CertificationResult>> by_sigma;
  std::vector<CleanPrediction> clean;
  CurveTable table;
};

// Certifies the first max_inputs test samples at every sigma and writes the
// per-input CSVs, clean predictions, curve table and summary.
inline CertifyOutput certify_model(const Model<float>& model, const Dataset& test,
                                   const CertifyConfig& c, std::uint64_t seed,
                                   const std::filesystem::path& dir) {
  const std::size_t count = c.max_inputs ? std::min(c.max_inputs, test.size()) : test.size();
  CertifyOutput out;
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto preds = model.classify(test.gather(idx));
  for (std::size_t i = 0; i < count; ++i) out.clean.push_back({i, test.labels[i], preds[i]});

  std::filesystem::create_directories(dir);
  for (const double sigma : c.sigmas) {
    SmoothingParams p{sigma, c.n0, c.n, c.alpha, c.batch, seed};
    auto rows = certify_dataset(model, test, p, count);
    write_text(certify_csv_path(dir, sigma), certification_csv(rows));
    out.by_sigma[sigma] = std::move(rows);
  }
  out.table = build_curve_table(out.by_sigma, clean_accuracy(out.clean));
  write_text(dir / "clean_predictions.csv", clean_predictions_csv(out.clean));
  write_text(dir / "curves.csv", curves_csv(out.table));
  write_text(dir / "curve_summary.csv", curve_summary_csv(out.table));
  return out;
}

inline CertifyOutput run_certify(const ExperimentConfig& cfg, const Tasks& tasks) {
  if (!cfg.certify.present) throw ConfigError("certify", "section is missing");
  std::filesystem::path source = cfg.certify.checkpoint;
  if (source.empty()) {
    source = std::filesystem::exists(finetune_checkpoint_path(cfg)) ? finetune_checkpoint_path(cfg)
                                                                     : pretrain_checkpoint_path(cfg);
  }
  const Model<float> model = detail::load_existing(source);
  const Dataset& test = tasks.get(cfg.certify.task).test;
  if (model.num_classes() != test.num_classes) {
    throw ConfigError("certify.task", "checkpoint has " + std::to_string(model.num_classes()) +
                                          " classes but the " + cfg.certify.task + " task has " +
                                          std::to_string(test.num_classes));
  }
  return certify_model(model, test, cfg.certify, cfg.certify_seed(), cfg.output_dir);
}

struct ReportOutput {
  std::vector<RunTable> runs;
  std::string text;
};

inline ReportOutput run_report(const std::vector<std::filesystem::path>& dirs,
                               const std::filesystem::path& out_dir) {
  if (dirs.empty()) throw Error("report needs at least one run directory");
  ReportOutput out;
  for (const auto& d : dirs) {
    std::string name = d.filename().string();
    if (name.empty()) name = d.parent_path().filename().string();
    out.runs.push_back({name, load_run(d)});
  }
  check_same_grid(out.runs);
  out.text = comparison_text(out.runs);
  std::filesystem::create_directories(out_dir);
  write_text(out_dir / "report.txt", out.text);
  write_text(out_dir / "report.csv", comparison_csv(out.runs));
  write_text(out_dir / "report_curves.csv", plot_csv(out.runs));
  return out;
}

}  // namespace smoothcert
