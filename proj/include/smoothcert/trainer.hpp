#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/crc.hpp>

#include "smoothcert/data.hpp"
#include "smoothcert/error.hpp"
#include "smoothcert/format.hpp"
#include "smoothcert/model.hpp"
#include "smoothcert/optim.hpp"

namespace smoothcert {

enum class Stage { pretrain, finetune };
enum class FinetuneMode { full_network, fixed_feature };

inline std::string_view to_string(FinetuneMode m) {
  return m == FinetuneMode::full_network ? "full_network" : "fixed_feature";
}

inline FinetuneMode parse_finetune_mode(std::string_view s) {
  if (s == "full_network") return FinetuneMode::full_network;
  if (s == "fixed_feature") return FinetuneMode::fixed_feature;
  throw Error("unknown fine-tune mode '" + std::string(s) + "'");
}

struct TrainPlan {
  Stage stage = Stage::pretrain;
  NoiseSpec noise;
  FinetuneMode mode = FinetuneMode::full_network;
  SgdConfig sgd;  // sgd.epochs is the run length
  int eval_every = 1;
  std::uint64_t seed = 0;
  // Fine-tuning trains on clean images unless this is set (ablation rows
  // that fine-tune under noise).
  bool allow_noisy_finetune = false;
  bool freeze_norm_stats = false;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  std::optional<double> clean_acc;  // eval-mode accuracy on the test split
  double lr = 0.0;                  // rate of the epoch's final step
  double train_acc = 0.0;           // from the train-mode passes
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  double base_lr = 0.0;
  double wall_seconds = 0.0;
  std::size_t samples_seen = 0;
  std::size_t noisy_samples = 0;  // samples drawn with sigma > 0
  std::string checkpoint;

  std::optional<double> final_clean_acc() const {
    for (auto it = epochs.rbegin(); it != epochs.rend(); ++it) {
      if (it->clean_acc) return it->clean_acc;
    }
    return std::nullopt;
  }

  // epoch,loss,clean_acc,lr,train_acc; clean_acc is blank when not evaluated.
  std::string to_csv() const {
    std::ostringstream os;
    os << "epoch,loss,clean_acc,lr,train_acc\n";
    for (const EpochRecord& e : epochs) {
      os << e.epoch << ',' << format_double(e.loss) << ','
         << (e.clean_acc ? format_double(*e.clean_acc) : std::string()) << ','
         << format_double(e.lr) << ',' << format_double(e.train_acc) << '\n';
    }
    return os.str();
  }
};

// Raised when the loss or logits stop being finite. The model has already
// been rolled back to its state at the start of the failing epoch.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, TrainReport report)
      : Error(what), report_(std::move(report)) {}
  const TrainReport& report() const noexcept { return report_; }

 private:
  TrainReport report_;
};

// Eval-mode top-1 accuracy.
template <typename T>
double evaluate(const Model<T>& model, const Dataset& ds, std::size_t batch = 256) {
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    const std::size_t end = std::min(ds.size(), start + batch);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto pred = model.classify(ds.gather(idx).template cast<T>());
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ds.labels[start + i];
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// CRC-32 over the raw bytes of every parameter in layers [first, last).
template <typename T>
std::uint32_t parameter_checksum(Model<T>& model, std::size_t first, std::size_t last) {
  boost::crc_32_type crc;
  for (auto& p : model.parameters(first)) {
    if (p.layer >= last) break;
    crc.process_bytes(p.tensor->ptr(), p.tensor->size() * sizeof(T));
  }
  return crc.checksum();
}

template <typename T>
std::uint32_t body_checksum(Model<T>& model) {
  return parameter_checksum(model, 0, model.head_index());
}

namespace detail {

template <typename T>
TrainReport train_loop(Model<T>& model, const Dataset& train, const Dataset* test,
                       const TrainPlan& plan, const NoiseSpec& noise,
                       std::size_t first_layer) {
  plan.sgd.validate();
  if (plan.eval_every < 1) throw ConfigError("eval_every", "must be at least 1");
  if (model.input_shape() != train.sample_shape()) {
    throw ShapeError("dataset sample shape " + shape_str(train.sample_shape()) +
                     " does not match model input " + shape_str(model.input_shape()));
  }
  if (model.num_classes() != train.num_classes) {
    throw ShapeError("model has " + std::to_string(model.num_classes()) +
                     " outputs but dataset has " + std::to_string(train.num_classes) +
                     " classes");
  }
  const auto started = std::chrono::steady_clock::now();
  TrainReport report;
  report.base_lr = plan.sgd.base_lr;

  Sgd<T> opt(plan.sgd);
  const auto params = model.parameter_tensors(first_layer);
  model.set_freeze_running_stats(plan.freeze_norm_stats);

  const std::size_t n = train.size();
  const std::size_t bs = static_cast<std::size_t>(plan.sgd.batch_size);
  const std::size_t batches = (n + bs - 1) / bs;
  std::vector<std::size_t> order(n);

  for (int epoch = 0; epoch < plan.sgd.epochs; ++epoch) {
    model.clear_caches();
    const Model<T> snapshot = model;
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng::stream(plan.seed, 0x73687566ULL, epoch).shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0;
    std::size_t correct = 0;
    double lr = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t start = b * bs;
      const std::size_t end = std::min(n, start + bs);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const NoisyBatch batch =
          sample_noisy_batch(train, idx, noise, static_cast<std::uint64_t>(epoch));
      for (const double s : batch.sigmas) report.noisy_samples += s > 0.0;
      report.samples_seen += idx.size();

      model.zero_grad();
      LossResult<T> res;
      try {
        res = model.forward_backward(batch.images.template cast<T>(), batch.labels,
                                     first_layer);
      } catch (const NumericError& e) {
        model = snapshot;
        throw TrainingDiverged(std::string("training diverged in epoch ") +
                                   std::to_string(epoch) + ": " + e.what(),
                               report);
      }
      if (!std::isfinite(res.loss)) {
        model = snapshot;
        throw TrainingDiverged(
            "training diverged in epoch " + std::to_string(epoch) + ": loss is not finite",
            report);
      }
      lr = opt.step(params,
                    epoch + static_cast<double>(b) / static_cast<double>(batches));
      loss_sum += res.loss * static_cast<double>(idx.size());
      correct += res.correct;
    }
    model.clear_caches();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(n);
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    rec.lr = lr;
    const bool last = epoch + 1 == plan.sgd.epochs;
    if (test && ((epoch + 1) % plan.eval_every == 0 || last)) {
      rec.clean_acc = evaluate(model, *test);
    }
    report.epochs.push_back(rec);
  }
  model.set_freeze_running_stats(false);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

}  // namespace detail

// Every parameter trains; each batch is drawn through the mixed-noise sampler.
// Batch-norm running statistics follow the same data stream.
template <typename T>
TrainReport pretrain(Model<T>& model, const Dataset& upstream, const Dataset* test,
                     const TrainPlan& plan) {
  if (plan.stage != Stage::pretrain) throw Error("pretrain() needs a pretrain plan");
  NoiseSpec noise = plan.noise;
  noise.validate();
  return detail::train_loop(model, upstream, test, plan, noise, 0);
}

// Copy of `source` with its head replaced by a fresh `num_classes`-way layer.
template <typename T>
Model<T> swap_head(const Model<T>& source, std::size_t num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw Error("a classification head needs at least 2 classes");
  Model<T> model = source;
  model.clear_caches();
  model.replace_head(num_classes, seed);
  return model;
}

// Clean-image fine-tuning. fixed_feature updates only the head, but the body
// still runs in train mode so batch-norm statistics keep adapting.
template <typename T>
TrainReport finetune(Model<T>& model, const Dataset& downstream, const Dataset* test,
                     const TrainPlan& plan) {
  if (plan.stage != Stage::finetune) throw Error("finetune() needs a finetune plan");
  NoiseSpec noise = plan.allow_noisy_finetune ? plan.noise : NoiseSpec::clean(plan.noise.seed);
  noise.validate();
  const std::size_t first =
      plan.mode == FinetuneMode::fixed_feature ? model.head_index() : 0;
  return detail::train_loop(model, downstream, test, plan, noise, first);
}

}  // namespace smoothcert
