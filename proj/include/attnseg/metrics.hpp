#pragma once

#include <optional>
#include <string>
#include <vector>

#include "attnseg/model.hpp"
#include "attnseg/tensor.hpp"

namespace attnseg {

struct ConfusionCounts {
  long long tp = 0, fp = 0, tn = 0, fn = 0;

  long long total() const { return tp + fp + tn + fn; }
  void add(const Tensor& pred, const Tensor& gt);
};

struct MetricReport {
  Scalar pixel_accuracy = 0.0;
  Scalar iou_fire = 0.0;
  Scalar iou_background = 0.0;
  Scalar mean_iou = 0.0;
  std::optional<Scalar> class_accuracy;
  Scalar avg_consistency = 0.0;

  std::string to_json() const;
  static MetricReport from_json(const std::string& text);
};

/// M_ij = 1(prob_ij >= threshold).
Tensor binarize(const Tensor& seg_prob, Scalar threshold);

/// Per-class IoU with the empty-union convention (both empty -> 1).
std::pair<Scalar, Scalar> iou_pair(const Tensor& pred, const Tensor& gt);

/// 1 when the label inferred from the mask, 1(sum_ij M_ij > 0), matches.
int consistency(const Tensor& pred_mask, int label);

/// A ground-truth record as the evaluator sees it: a mask and its label.
struct EvalRecord {
  Tensor mask;  // binary, sized like the prediction
  int label = 0;
};

/// Table-style aggregation: per-image pixel accuracy averaged over images,
/// IoU over global confusion counts, classification accuracy at 0.5, mean
/// consistency. class_accuracy is absent when outputs carry no class_prob.
MetricReport evaluate_corpus(const std::vector<SegClassOutput>& outputs,
                             const std::vector<EvalRecord>& records, Scalar threshold);

/// Aligned text table; one row per (name, report).
std::string render_metric_table(const std::vector<std::pair<std::string, MetricReport>>& rows);

}  // namespace attnseg
