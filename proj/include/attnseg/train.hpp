#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "attnseg/data.hpp"
#include "attnseg/layers.hpp"
#include "attnseg/loss.hpp"
#include "attnseg/metrics.hpp"
#include "attnseg/model.hpp"

namespace attnseg {

enum class Optimizer { adam };

struct TrainConfig {
  Scalar lr = 5e-4;
  Scalar weight_decay = 1e-5;
  Scalar lambda = 0.6;
  int epochs = 60;
  int batch_size = 8;
  uint64_t seed = 1;
  Optimizer optimizer = Optimizer::adam;
  int input_size = 64;
  std::string checkpoint_dir;  // empty: keep checkpoints in memory only
  bool deterministic = true;
  bool hflip = false;      // horizontal-flip augmentation on the train split
  Scalar threshold = 0.5;  // mask binarization for validation metrics
  bool verbose = false;

  /// Schedule hook: 0-based epoch -> lr multiplier. Constant lr when unset.
  std::function<Scalar(int)> lr_schedule;

  void validate() const;
  std::string to_json() const;
  /// Partial override of the defaults; unknown keys are an error.
  static TrainConfig from_json(const std::string& text);
};

/// ADAM with decoupled weight decay:
///   p -= lr_eff * (mhat / (sqrt(vhat) + eps) + weight_decay * p)
/// With lr = 0 a step leaves parameters bit-identical.
class AdamW {
 public:
  AdamW(Scalar lr, Scalar weight_decay, Scalar beta1 = 0.9, Scalar beta2 = 0.999,
        Scalar eps = 1e-8);

  /// One update from the gradients currently held by `params`. The parameter
  /// list must be identical (order and shapes) on every call.
  void step(const std::vector<ParamRef>& params, Scalar lr_scale = 1.0);

  long steps_taken() const { return t_; }

 private:
  Scalar lr_, wd_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<VecX> m_, v_;
};

struct EpochRecord {
  int epoch = 0;  // 1-based in logs
  LossBreakdown train_loss;
  LossBreakdown val_loss;
  MetricReport val_metrics;
  Scalar lr = 0.0;
  bool best = false;

  std::string to_json() const;  // single line, history JSONL format
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;  // 1-based
  Scalar best_val_total = 0.0;
  std::string best_checkpoint;  // empty when checkpoint_dir is empty
  std::string last_checkpoint;
  std::string history_path;
};

/// Loss and metrics of a model over a fixed record list (no mutation).
struct EvalOutcome {
  LossBreakdown loss;
  MetricReport metrics;
};
EvalOutcome evaluate_split(const Model& model, const std::vector<const SampleRecord*>& records,
                           Scalar lambda, Scalar threshold);

/// Optimizes the model on the manifest's train split, selects the epoch with
/// the lowest total validation loss, and leaves the model holding that best
/// state. Models without a classification branch train on the segmentation
/// term alone (lambda treated as 1). Images whose size differs from
/// config.input_size are resized up front.
TrainResult train(Model& model, const DatasetManifest& manifest, const TrainConfig& config);

/// Pure forward passes, outputs in input order.
std::vector<SegClassOutput> predict(const Model& model, const std::vector<Tensor>& images);

}  // namespace attnseg
