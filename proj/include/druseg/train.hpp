#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "druseg/dataset.hpp"
#include "druseg/metrics.hpp"
#include "druseg/model.hpp"

namespace druseg {

enum class Scenario { kDirectTraining, kFineTuning, kDirectTransfer };

inline const char* scenario_name(Scenario s) {
  switch (s) {
    case Scenario::kDirectTraining: return "direct_training";
    case Scenario::kFineTuning: return "fine_tuning";
    case Scenario::kDirectTransfer: return "direct_transfer";
  }
  throw ValueError("unknown scenario");
}

inline Scenario scenario_from_string(const std::string& s) {
  if (s == "direct_training") return Scenario::kDirectTraining;
  if (s == "fine_tuning") return Scenario::kFineTuning;
  if (s == "direct_transfer") return Scenario::kDirectTransfer;
  throw ConfigError("unknown scenario '" + s +
                    "' (expected direct_training, fine_tuning or "
                    "direct_transfer)");
}

struct TrainConfig {
  Scenario scenario = Scenario::kDirectTraining;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::int64_t batch_size = 16;
  std::int64_t max_epochs = 500;
  std::int64_t patience = 50;
  double val_fraction = 0.2;
  std::uint64_t seed = 1;
  AugmentParams augment;

  // Scenario default learning rates: 0.01 from scratch, 0.001 when fine-tuning.
  static TrainConfig defaults_for(Scenario scenario) {
    TrainConfig cfg;
    cfg.scenario = scenario;
    cfg.learning_rate = scenario == Scenario::kFineTuning ? 0.001 : 0.01;
    return cfg;
  }

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("train: learning_rate must be positive and finite");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw ConfigError("train: momentum must be in [0, 1)");
    }
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
      throw ConfigError("train: val_fraction must be in (0, 1)");
    }
  }
};

// Classical momentum: v <- momentum * v - lr * grad; w <- w + v.
inline void sgd_momentum_step(std::vector<ParamRef>& refs, double lr,
                              double momentum) {
  for (auto& r : refs) {
    double* w = r.value->data();
    const double* g = r.grad->data();
    double* v = r.velocity->data();
    const std::int64_t n = r.value->numel();
    for (std::int64_t i = 0; i < n; ++i) {
      v[i] = momentum * v[i] - lr * g[i];
      w[i] += v[i];
    }
  }
}

// Patience-based stopping on the validation loss. An epoch improves only if
// it beats the best seen by more than a small absolute slack.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::int64_t patience, double min_delta = 1e-7)
      : patience_(patience), min_delta_(min_delta) {
    if (patience < 1) throw ValueError("early stopping: patience must be >= 1");
  }

  bool update(double val_loss) {
    ++epoch_;
    if (val_loss < best_ - min_delta_) {
      best_ = val_loss;
      best_epoch_ = epoch_;
      since_best_ = 0;
      return true;
    }
    ++since_best_;
    return false;
  }

  bool should_stop() const { return since_best_ >= patience_; }
  double best() const { return best_; }
  std::int64_t best_epoch() const { return best_epoch_; }
  std::int64_t epochs_since_best() const { return since_best_; }

 private:
  std::int64_t patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  std::int64_t best_epoch_ = 0;
  std::int64_t since_best_ = 0;
  std::int64_t epoch_ = 0;
};

struct SplitIndices {
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> val;
};

// Shuffles [0, n) with the given stream and carves the leading ceil(f * n)
// indices off for validation.
inline SplitIndices split_validation(std::int64_t n, double fraction,
                                     Rng& rng) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ConfigError("split: validation fraction must be in (0, 1)");
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (std::int64_t i = n - 1; i > 0; --i) {
    const std::int64_t j =
        static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(order[static_cast<std::size_t>(i)],
              order[static_cast<std::size_t>(j)]);
  }
  const std::int64_t val_count = static_cast<std::int64_t>(
      std::ceil(fraction * static_cast<double>(n)));
  if (val_count < 1 || n - val_count < 1) {
    throw ConfigError("split: " + std::to_string(n) +
                      " samples cannot be split with validation fraction " +
                      std::to_string(fraction));
  }
  SplitIndices out;
  out.val.assign(order.begin(), order.begin() + val_count);
  out.train.assign(order.begin() + val_count, order.end());
  return out;
}

struct EpochStats {
  std::int64_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  bool improved = false;
  double seconds = 0.0;
};

enum class StopReason { kMaxEpochs, kPatience, kCallback };

inline const char* stop_reason_name(StopReason r) {
  switch (r) {
    case StopReason::kMaxEpochs: return "max_epochs";
    case StopReason::kPatience: return "patience";
    case StopReason::kCallback: return "callback";
  }
  return "unknown";
}

struct TrainResult {
  std::vector<EpochStats> history;
  std::int64_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::int64_t epochs_run = 0;
  StopReason stop_reason = StopReason::kMaxEpochs;
  std::array<std::uint64_t, 6> final_rng_state{};
};

// Called after each epoch; returning true stops training.
using EpochCallback = std::function<bool(const EpochStats&, Network&)>;

namespace detail {

inline constexpr std::uint64_t kSplitTag = 0x73706C6974;    // "split"
inline constexpr std::uint64_t kShuffleTag = 0x73687566;    // "shuf"
inline constexpr std::uint64_t kModelTag = 0x6D6F64656C;    // "model"
inline constexpr std::uint64_t kAugmentTag = 0x617567;      // "aug"

struct BatchTensors {
  Tensor input;
  Tensor target;
};

inline BatchTensors pack_batch(const std::vector<Sample>& samples,
                               const std::vector<std::int64_t>& order,
                               std::size_t begin, std::size_t end,
                               const AugmentParams* augment_params, Rng* root,
                               std::int64_t epoch) {
  const Sample& probe = samples[static_cast<std::size_t>(order[begin])];
  const std::int64_t c = probe.image.extent(0);
  const std::int64_t h = probe.image.extent(1);
  const std::int64_t w = probe.image.extent(2);
  const std::int64_t m = static_cast<std::int64_t>(end - begin);
  BatchTensors out{Tensor::zeros({m, c, h, w}), Tensor::zeros({m, 1, h, w})};
  for (std::size_t k = begin; k < end; ++k) {
    const std::int64_t idx = order[k];
    const Sample* s = &samples[static_cast<std::size_t>(idx)];
    Sample augmented;
    if (augment_params != nullptr && augment_params->enabled) {
      Rng stream = root->derive(
          {kAugmentTag, static_cast<std::uint64_t>(epoch),
           static_cast<std::uint64_t>(idx)});
      augmented = augment(*s, *augment_params, stream);
      s = &augmented;
    }
    if (s->image.extent(0) != c || s->image.extent(1) != h ||
        s->image.extent(2) != w) {
      throw ShapeError("train: sample '" + s->id + "' has shape " +
                       s->image.shape_string() +
                       ", expected it to match the first sample");
    }
    const std::int64_t at = static_cast<std::int64_t>(k - begin);
    std::copy(s->image.data(), s->image.data() + c * h * w,
              out.input.data() + at * c * h * w);
    std::copy(s->mask.data(), s->mask.data() + h * w,
              out.target.data() + at * h * w);
  }
  return out;
}

}  // namespace detail

// Mean per-image loss of the network on un-augmented samples in eval mode.
inline double validation_loss(Network& net, const std::vector<Sample>& samples,
                              const std::vector<std::int64_t>& indices,
                              std::int64_t batch_size) {
  double total = 0.0;
  std::int64_t counted = 0;
  for (std::size_t at = 0; at < indices.size();
       at += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop =
        std::min(indices.size(), at + static_cast<std::size_t>(batch_size));
    detail::BatchTensors b = detail::pack_batch(samples, indices, at, stop,
                                                nullptr, nullptr, 0);
    const Tensor y = net.forward(b.input, Mode::kEval, nullptr);
    const double loss = jaccard_loss(y, b.target);
    const std::int64_t m = static_cast<std::int64_t>(stop - at);
    total += loss * static_cast<double>(m);
    counted += m;
  }
  if (counted == 0) throw ValueError("validation: no samples");
  return total / static_cast<double>(counted);
}

// Momentum SGD over the per-image-mean overlap loss with a held-out
// validation subset, geometric augmentation of training batches, patience
// stopping, and restoration of the best-epoch weights at the end.
inline TrainResult train(Network& net, const std::vector<Sample>& samples,
                         const TrainConfig& cfg,
                         const EpochCallback& callback = nullptr) {
  cfg.validate();
  if (samples.size() < 2) {
    throw ConfigError("train: need at least 2 samples, got " +
                      std::to_string(samples.size()));
  }
  for (const Sample& s : samples) {
    if (s.image.rank() != 3 || s.mask.rank() != 2) {
      throw ShapeError("train: sample '" + s.id + "' is not image [C,H,W] + "
                       "mask [H,W]");
    }
  }
  Rng root(cfg.seed);
  Rng split_rng = root.derive({detail::kSplitTag});
  const SplitIndices split = split_validation(
      static_cast<std::int64_t>(samples.size()), cfg.val_fraction, split_rng);
  Rng model_rng = root.derive({detail::kModelTag});

  EarlyStopping stopper(cfg.patience);
  TrainResult result;
  std::vector<double> best_params = net.snapshot_params();
  std::vector<double> best_velocity = net.snapshot_velocity();
  result.stop_reason = StopReason::kMaxEpochs;

  std::vector<std::int64_t> order = split.train;
  for (std::int64_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle_rng = root.derive(
        {detail::kShuffleTag, static_cast<std::uint64_t>(epoch)});
    for (std::int64_t i = static_cast<std::int64_t>(order.size()) - 1; i > 0;
         --i) {
      const std::int64_t j = static_cast<std::int64_t>(
          shuffle_rng.below(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(j)]);
    }
    double epoch_loss = 0.0;
    std::int64_t seen = 0;
    std::int64_t batch_index = 0;
    for (std::size_t at = 0; at < order.size();
         at += static_cast<std::size_t>(cfg.batch_size), ++batch_index) {
      const std::size_t stop =
          std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
      detail::BatchTensors b = detail::pack_batch(
          samples, order, at, stop, &cfg.augment, &root, epoch);
      const Tensor y = net.forward(b.input, Mode::kTrain, &model_rng);
      Tensor grad;
      const double loss = jaccard_loss_with_grad(y, b.target, &grad);
      if (!std::isfinite(loss)) {
        throw DivergenceError(
            "training diverged: non-finite loss at epoch " +
                std::to_string(epoch) + ", batch " +
                std::to_string(batch_index),
            static_cast<long>(epoch), static_cast<long>(batch_index));
      }
      net.backward(grad);
      sgd_momentum_step(net.params(), cfg.learning_rate, cfg.momentum);
      const std::int64_t m = static_cast<std::int64_t>(stop - at);
      epoch_loss += loss * static_cast<double>(m);
      seen += m;
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = epoch_loss / static_cast<double>(seen);
    stats.val_loss =
        validation_loss(net, samples, split.val, cfg.batch_size);
    if (!std::isfinite(stats.val_loss)) {
      throw DivergenceError(
          "training diverged: non-finite validation loss at epoch " +
              std::to_string(epoch),
          static_cast<long>(epoch), -1L);
    }
    stats.improved = stopper.update(stats.val_loss);
    stats.seconds = std::chrono::duration<double>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
    if (stats.improved) {
      best_params = net.snapshot_params();
      best_velocity = net.snapshot_velocity();
    }
    result.history.push_back(stats);
    result.epochs_run = epoch;
    if (callback && callback(stats, net)) {
      result.stop_reason = StopReason::kCallback;
      break;
    }
    if (stopper.should_stop()) {
      result.stop_reason = StopReason::kPatience;
      break;
    }
  }
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best();
  result.final_rng_state = model_rng.save_state();
  net.restore_params(best_params);
  net.restore_velocity(best_velocity);
  return result;
}

// Eval-mode inference over samples, scored against their masks.
inline EvalReport evaluate_network(Network& net,
                                   const std::vector<Sample>& samples,
                                   std::int64_t batch_size = 16) {
  if (samples.empty()) throw ValueError("evaluate: no samples");
  if (batch_size < 1) throw ValueError("evaluate: batch_size must be >= 1");
  std::vector<Tensor> preds, truths;
  std::vector<std::string> ids;
  std::vector<std::int64_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t at = 0; at < order.size();
       at += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop =
        std::min(order.size(), at + static_cast<std::size_t>(batch_size));
    detail::BatchTensors b = detail::pack_batch(samples, order, at, stop,
                                                nullptr, nullptr, 0);
    const Tensor y = net.forward(b.input, Mode::kEval, nullptr);
    const std::int64_t h = y.extent(2), w = y.extent(3);
    for (std::size_t k = at; k < stop; ++k) {
      const std::int64_t i = static_cast<std::int64_t>(k - at);
      Tensor plane = Tensor::zeros({h, w});
      std::copy(y.data() + i * h * w, y.data() + (i + 1) * h * w,
                plane.data());
      preds.push_back(std::move(plane));
      truths.push_back(samples[static_cast<std::size_t>(order[k])].mask);
      ids.push_back(samples[static_cast<std::size_t>(order[k])].id);
    }
  }
  return evaluate(preds, truths, ids);
}

struct ScenarioResult {
  bool trained = false;
  TrainResult train_result;
  bool has_eval = false;
  EvalReport eval;
};

inline std::vector<Sample> load_split_samples(const DatasetManifest& manifest,
                                              const std::string& split,
                                              std::int64_t input_size) {
  std::vector<Sample> out;
  for (const ManifestEntry& e : entries_with_split(manifest, split)) {
    out.push_back(load_sample(e, input_size));
  }
  return out;
}

// The three training protocols. `from_checkpoint` states whether the
// network's weights came from a saved model; each scenario requires or
// forbids that.
//  - direct_training: fresh weights, fit the train split.
//  - fine_tuning: saved weights, fit the finetune split (falls back to the
//    train split when the manifest has no finetune rows).
//  - direct_transfer: saved weights evaluated untouched.
inline ScenarioResult run_scenario(Network& net,
                                   const DatasetManifest& manifest,
                                   const TrainConfig& cfg,
                                   bool from_checkpoint,
                                   const EpochCallback& callback = nullptr) {
  cfg.validate();
  const std::int64_t input_size = net.config().input_size;
  ScenarioResult result;
  switch (cfg.scenario) {
    case Scenario::kDirectTraining: {
      if (from_checkpoint) {
        throw ConfigError(
            "direct_training starts from fresh weights; drop the checkpoint "
            "or pick fine_tuning / direct_transfer");
      }
      const std::vector<Sample> data =
          load_split_samples(manifest, "train", input_size);
      if (data.empty()) {
        throw ConfigError("direct_training: manifest has no train rows");
      }
      result.train_result = train(net, data, cfg, callback);
      result.trained = true;
      break;
    }
    case Scenario::kFineTuning: {
      if (!from_checkpoint) {
        throw ConfigError("fine_tuning requires a checkpoint to start from");
      }
      std::vector<Sample> data =
          load_split_samples(manifest, "finetune", input_size);
      if (data.empty()) {
        data = load_split_samples(manifest, "train", input_size);
      }
      if (data.empty()) {
        throw ConfigError(
            "fine_tuning: manifest has neither finetune nor train rows");
      }
      result.train_result = train(net, data, cfg, callback);
      result.trained = true;
      break;
    }
    case Scenario::kDirectTransfer: {
      if (!from_checkpoint) {
        throw ConfigError(
            "direct_transfer evaluates saved weights; a checkpoint is "
            "required");
      }
      break;
    }
  }
  const std::vector<Sample> eval_data =
      load_split_samples(manifest, "eval", input_size);
  if (!eval_data.empty()) {
    result.eval = evaluate_network(net, eval_data, cfg.batch_size);
    result.has_eval = true;
  }
  return result;
}

}  // namespace druseg
